//! Learned instance adjacency, graph convolutions over it, and the soft
//! Weisfeiler-Lehman kernel that ties the generated graph to the class
//! template.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggnet::glorot;
use crate::error::{Result, TggError};
use crate::protograph::PrototypeGraph;
use crate::tensor::{Binder, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_EDGE_HIDDEN: usize = 32;
pub const DEFAULT_BANDWIDTH: f64 = 1.0;
pub const DEFAULT_WL_ITERATIONS: usize = 2;

/// `Φ(x) = softplus(w)ᵀ · relu(W₁ᵀ x)` on absolute embedding differences.
///
/// No biases and non-negative output weights, so `Φ(0) = 0` and `Φ ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLearner {
    pub hidden: ParamId,
    pub output: ParamId,
    pub bandwidth: f64,
}

/// Generated episode graph in exportable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceGraph {
    /// Revised node embeddings `[n x d]`.
    pub embeddings: Tensor,
    /// `[n x n]`, entries in `(0, 1]`.
    pub adjacency: Tensor,
    /// Episode-local class of each labeled node.
    pub known: Vec<Option<usize>>,
    /// Episode-local ground truth of every node, when known.
    pub truth: Option<Vec<usize>>,
    pub unseen: Vec<bool>,
    pub classes: usize,
    /// Columns a prediction may take.
    pub label_space: Vec<usize>,
}

/// `|h_v − h_u|` for every ordered pair, row `v·n + u`, `[n² x d]`.
pub fn pairwise_abs_diff<'t>(h: Var<'t>) -> Result<Var<'t>> {
    let n = h.shape()[0];
    let left: Vec<usize> = (0..n * n).map(|p| p / n).collect();
    let right: Vec<usize> = (0..n * n).map(|p| p % n).collect();
    Ok(h.gather_rows(&left)?.sub(&h.gather_rows(&right)?)?.abs())
}

impl EdgeLearner {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        bandwidth: f64,
        rng: &mut impl Rng,
    ) -> Self {
        EdgeLearner {
            hidden: store.register(format!("{prefix}.hidden"), glorot(rng, in_dim, hidden)),
            output: store.register(format!("{prefix}.output"), glorot(rng, hidden, 1)),
            bandwidth,
        }
    }

    /// Φ applied to each row of `x`, `[p x 1]`.
    pub fn phi<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&b.get(self.hidden))?
            .relu()
            .matmul(&b.get(self.output).softplus())
    }

    /// `A_vu = exp(−Φ(|h_v − h_u|) / 2δ²)`, `[n x n]`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        if self.bandwidth <= 0.0 {
            return Err(TggError::Config("edge bandwidth must be > 0".into()));
        }
        let n = h.shape()[0];
        let phi = self.phi(b, pairwise_abs_diff(h)?)?;
        Ok(phi
            .reshape(n, n)?
            .scale(-1.0 / (2.0 * self.bandwidth * self.bandwidth))
            .exp())
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalized_adjacency<'t>(a: Var<'t>) -> Result<Var<'t>> {
    let n = a.shape()[0];
    let tilde = a.add(&a.tape().constant(Tensor::eye(n)))?;
    let dinv = tilde.sum_rows().powf(-0.5);
    Ok(tilde.mul_col(&dinv)?.transpose().mul_col(&dinv)?.transpose())
}

/// `relu(S · H · W)`.
pub fn gcn_layer<'t>(h: Var<'t>, a: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(normalized_adjacency(a)?.matmul(&h.matmul(&w)?)?.relu())
}

/// Iterates `F ← rownorm(A + I) · F` from the class one-hots and concatenates
/// the column sums of `F / n` after each of the `r` iterations.
pub fn soft_wl_embedding<'t>(a: Var<'t>, onehots: &Tensor, r: usize) -> Result<Var<'t>> {
    if r == 0 {
        return Err(TggError::Config("soft-WL needs at least one iteration".into()));
    }
    let tape = a.tape();
    let n = a.shape()[0];
    let tilde = a.add(&tape.constant(Tensor::eye(n)))?;
    let p = tilde.div_col(&tilde.sum_rows())?;
    let mut f = tape.constant(onehots.clone());
    let mut parts = Vec::with_capacity(r);
    for _ in 0..r {
        f = p.matmul(&f)?;
        parts.push(f.sum_cols().scale(1.0 / n as f64));
    }
    Var::concat_cols(&parts)
}

/// Class template at instance granularity: weight 1 within a class and the
/// graph weight across classes.
pub fn lift_prototype(graph: &PrototypeGraph, classes: &[usize]) -> Tensor {
    let n = classes.len();
    let mut t = Tensor::zeros(n, n);
    for (v, &a) in classes.iter().enumerate() {
        for (u, &b) in classes.iter().enumerate() {
            t.set(v, u, graph.relation(Some(a), Some(b)));
        }
    }
    t
}

/// Episode-local one-hot matrix `[n x c]` from local class indices.
pub fn one_hots(local: &[usize], c: usize) -> Tensor {
    let mut t = Tensor::zeros(local.len(), c);
    for (v, &k) in local.iter().enumerate() {
        t.set(v, k, 1.0);
    }
    t
}

/// `‖wl(a) − wl(b)‖²`.
pub fn kernel_loss<'t>(a: Var<'t>, b: Var<'t>, onehots: &Tensor, r: usize) -> Result<Var<'t>> {
    let da = soft_wl_embedding(a, onehots, r)?;
    let db = soft_wl_embedding(b, onehots, r)?;
    Ok(da.sub(&db)?.square().sum())
}

/// Edge learners and GCN weights: `A₀ = edge₀(H)`, then per GCN layer
/// `H_l = relu(S(A_{l−1}) H_{l−1} W_l)` and `A_l = edge_l(H_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelKernel {
    pub edges: Vec<EdgeLearner>,
    pub gcn: Vec<ParamId>,
}

impl RelKernel {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        gcn_dims: &[usize],
        hidden: usize,
        bandwidth: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut edges = vec![EdgeLearner::new(store, "edge0", in_dim, hidden, bandwidth, rng)];
        let mut gcn = Vec::with_capacity(gcn_dims.len());
        let mut prev = in_dim;
        for (l, &d) in gcn_dims.iter().enumerate() {
            gcn.push(store.register(format!("gcn{l}.weight"), glorot(rng, prev, d)));
            edges.push(EdgeLearner::new(
                store,
                &format!("edge{}", l + 1),
                d,
                hidden,
                bandwidth,
                rng,
            ));
            prev = d;
        }
        RelKernel { edges, gcn }
    }

    /// Final adjacency `A_L`; with `use_gcn` off this is `edge₀(H)`.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, h: Var<'t>, use_gcn: bool) -> Result<Var<'t>> {
        let mut a = self.edges[0].forward(b, h)?;
        if use_gcn {
            let mut h = h;
            for (w, edge) in self.gcn.iter().zip(&self.edges[1..]) {
                h = gcn_layer(h, a, b.get(*w))?;
                a = edge.forward(b, h)?;
            }
        }
        Ok(a)
    }
}
