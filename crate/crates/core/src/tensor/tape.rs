use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::linalg::Lu;
use super::{matmul_into, Tensor};
use crate::error::{Result, TggError};

/// Elementwise maps with a known derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Exp,
    /// Subgradient 0 at 0.
    Abs,
    Softplus,
    Square,
    Ln,
    Powf(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Ln => x.ln(),
            Unary::Powf(p) => x.powf(p),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Ln => 1.0 / x,
            Unary::Powf(p) => p * x.powf(p - 1.0),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Whether batch norm uses batch statistics or the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Transpose(usize),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    SegmentWeightedSum {
        alpha: usize,
        values: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Solve {
        m: usize,
        b: usize,
        lu: Lu,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order and the backward sweep is a single reverse pass.
/// Gradients of leaves accumulate across repeated `backward` calls until
/// [`Tape::zero_grad`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TggError {
    TggError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == b.rows() && a.cols() == b.cols() {
        Ok(())
    } else {
        Err(dim_err(op, a, b))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let vals = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), vals)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grads.borrow()[self.id].clone()
    }

    /// Scalar value; panics if the node is not one element.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn un(&self, v: Tensor, op: Op) -> Var<'t> {
        self.tape.record(v, op, &[self.id])
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self
            .tape
            .record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.tape.record(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.tape.record(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.tape.record(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// `[n x c] + [1 x c]`, broadcasting the row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(dim_err("add_row", &a, &r));
        }
        let c = a.cols();
        let vals = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r.values()[i % c])
            .collect();
        let out = Tensor::matrix(a.rows(), c, vals);
        Ok(self.tape.record(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// `[n x c] + [n x 1]`, broadcasting the column.
    pub fn add_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (a, k) = (self.value(), col.value());
        if k.cols() != 1 || k.rows() != a.rows() {
            return Err(dim_err("add_col", &a, &k));
        }
        let c = a.cols();
        let vals = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + k.values()[i / c])
            .collect();
        let out = Tensor::matrix(a.rows(), c, vals);
        Ok(self.tape.record(out, Op::AddCol(self.id, col.id), &[self.id, col.id]))
    }

    /// `[n x c] * [n x 1]`, scaling each row.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (a, k) = (self.value(), col.value());
        if k.cols() != 1 || k.rows() != a.rows() {
            return Err(dim_err("mul_col", &a, &k));
        }
        let c = a.cols();
        let vals = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * k.values()[i / c])
            .collect();
        let out = Tensor::matrix(a.rows(), c, vals);
        Ok(self.tape.record(out, Op::MulCol(self.id, col.id), &[self.id, col.id]))
    }

    /// `[n x c] / [n x 1]`, dividing each row.
    pub fn div_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        let (a, k) = (self.value(), col.value());
        if k.cols() != 1 || k.rows() != a.rows() {
            return Err(dim_err("div_col", &a, &k));
        }
        let c = a.cols();
        let vals = a
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x / k.values()[i / c])
            .collect();
        let out = Tensor::matrix(a.rows(), c, vals);
        Ok(self.tape.record(out, Op::DivCol(self.id, col.id), &[self.id, col.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.un(self.value().map(|x| x * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.un(self.value().map(|x| x + s), Op::AddScalar(self.id))
    }

    pub fn unary(&self, kind: Unary) -> Var<'t> {
        self.un(self.value().map(|x| kind.apply(x)), Op::Unary(self.id, kind))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Unary::Powf(p))
    }

    /// Row-wise softmax; masked-out entries (`mask[i] == false`) are exactly 0.
    ///
    /// Scores are shifted by each row's unmasked maximum before
    /// exponentiation. A row with no unmasked entry is an error.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        if let Some(mask) = mask {
            if mask.len() != n * m {
                return Err(TggError::Dimension {
                    op: "softmax_rows mask",
                    left: x.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let keep = |i: usize| mask.is_none_or(|mk| mk[i]);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(r * m + j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TggError::DegenerateRow { row: r });
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(r * m + j) {
                    let e = (v - max).exp();
                    out[r * m + j] = e;
                    z += e;
                }
            }
            for o in &mut out[r * m..(r + 1) * m] {
                *o /= z;
            }
        }
        Ok(self.un(Tensor::matrix(n, m, out), Op::Softmax(self.id)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let (n, m) = (x.rows(), x.cols());
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                out[r * m + j] = v - lse;
            }
        }
        self.un(Tensor::matrix(n, m, out), Op::LogSoftmax(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        self.un(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    /// Sum of each row, `[n x c] -> [n x 1]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let x = self.value();
        let vals = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.un(Tensor::matrix(x.rows(), 1, vals), Op::SumRows(self.id))
    }

    /// Sum of each column, `[n x c] -> [1 x c]`.
    pub fn sum_cols(&self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut vals = vec![0.0; c];
        for r in 0..x.rows() {
            for (v, &e) in vals.iter_mut().zip(x.row(r)) {
                *v += e;
            }
        }
        self.un(Tensor::matrix(1, c, vals), Op::SumCols(self.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.un(self.value().transpose(), Op::Transpose(self.id))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let x = self.value();
        if rows * cols != x.numel() {
            return Err(TggError::Dimension {
                op: "reshape",
                left: x.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let out = Tensor::matrix(rows, cols, x.values().to_vec());
        Ok(self.un(out, Op::Reshape(self.id)))
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(TggError::Dimension {
                op: "gather_rows",
                left: x.shape().to_vec(),
                right: vec![bad],
            });
        }
        let out = x.select_rows(idx);
        Ok(self.un(out, Op::GatherRows(self.id, Rc::new(idx.to_vec()))))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TggError::Contract("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].rows();
        for v in &vals {
            if v.rows() != n {
                return Err(dim_err("concat_cols", &vals[0], v));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(Tensor::matrix(n, total, out), Op::ConcatCols(ids.clone()), &ids))
    }

    /// `out[v] = Σ_j alpha[v, j] · values[v·k + j]` with `k = alpha.cols()`.
    ///
    /// `self` is `alpha [n x k]`, `values` is `[n·k x d]`.
    pub fn segment_weighted_sum(&self, values: &Var<'t>) -> Result<Var<'t>> {
        let (a, x) = (self.value(), values.value());
        let (n, k) = (a.rows(), a.cols());
        if x.rows() != n * k {
            return Err(dim_err("segment_weighted_sum", &a, &x));
        }
        let d = x.cols();
        let mut out = vec![0.0; n * d];
        for v in 0..n {
            let o = &mut out[v * d..(v + 1) * d];
            for j in 0..k {
                let w = a.get(v, j);
                for (oe, &xe) in o.iter_mut().zip(x.row(v * k + j)) {
                    *oe += w * xe;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::matrix(n, d, out),
            Op::SegmentWeightedSum {
                alpha: self.id,
                values: values.id,
            },
            &[self.id, values.id],
        ))
    }

    /// Batch normalization over rows with learned `gamma`/`beta` (`[1 x d]`).
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into the running estimates; eval mode uses the
    /// running estimates and leaves `state` untouched.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (n, d) = (x.rows(), x.cols());
        let (g, b) = (gamma.value(), beta.value());
        if g.numel() != d || b.numel() != d || state.running_mean.len() != d {
            return Err(dim_err("batch_norm", &x, &g));
        }
        let (mean, var) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(TggError::BatchTooSmall { n });
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let mo = state.momentum;
                for j in 0..d {
                    let unbiased = var[j] * n as f64 / (n as f64 - 1.0);
                    state.running_mean[j] = (1.0 - mo) * state.running_mean[j] + mo * mean[j];
                    state.running_var[j] = (1.0 - mo) * state.running_var[j] + mo * unbiased;
                }
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let h = (x.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, g.values()[j] * h + b.values()[j]);
            }
        }
        Ok(self.tape.record(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// `self⁻¹ · rhs` through an LU factorization.
    ///
    /// Backward: `dB = M⁻ᵀ G` and `dM = -(M⁻ᵀ G) Xᵀ`.
    pub fn solve(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let (m, b) = (self.value(), rhs.value());
        let lu = Lu::factor(&m)?;
        let x = lu.solve(&b)?;
        Ok(self.tape.record(
            x,
            Op::Solve {
                m: self.id,
                b: rhs.id,
                lu,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Reverse sweep from a one-element loss.
    ///
    /// Each node is visited once, in reverse creation order. Leaf gradients
    /// are added to whatever a previous call left there.
    pub fn backward(&self) -> Result<()> {
        let tape = self.tape;
        let nodes = tape.nodes.borrow();
        let loss = &nodes[self.id].value;
        if loss.numel() != 1 {
            return Err(TggError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(Tensor::new(loss.shape().to_vec(), vec![1.0])?);
        let mut leaf_grads = tape.grads.borrow_mut();

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, t: Tensor| {
                if nodes[i].requires_grad {
                    accumulate(&mut grads[i], t);
                }
            };
            match &node.op {
                Op::Leaf => accumulate(&mut leaf_grads[id], g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; av.numel()];
                        let bt = bv.transpose();
                        matmul_into(g.values(), bt.values(), &mut da, g.rows(), g.cols(), bt.cols());
                        send(*a, Tensor::matrix(av.rows(), av.cols(), da));
                    }
                    if nodes[*b].requires_grad {
                        let at = av.transpose();
                        let mut db = vec![0.0; bv.numel()];
                        matmul_into(at.values(), g.values(), &mut db, at.rows(), at.cols(), g.cols());
                        send(*b, Tensor::matrix(bv.rows(), bv.cols(), db));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, zip_map(&g, val(*b), |x, y| x * y));
                    send(*b, zip_map(&g, val(*a), |x, y| x * y));
                }
                Op::AddRow(a, r) => {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for (i, &v) in g.values().iter().enumerate() {
                        dr[i % c] += v;
                    }
                    send(*r, Tensor::matrix(1, c, dr));
                    send(*a, g);
                }
                Op::AddCol(a, k) => {
                    let dk = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    send(*k, Tensor::matrix(g.rows(), 1, dk));
                    send(*a, g);
                }
                Op::MulCol(a, k) => {
                    let (av, kv) = (val(*a), val(*k));
                    let c = g.cols();
                    let dk = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    let da = g
                        .values()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * kv.values()[i / c])
                        .collect();
                    send(*k, Tensor::matrix(g.rows(), 1, dk));
                    send(*a, Tensor::matrix(g.rows(), c, da));
                }
                Op::DivCol(a, k) => {
                    let (av, kv) = (val(*a), val(*k));
                    let c = g.cols();
                    let dk = (0..g.rows())
                        .map(|r| {
                            let kk = kv.values()[r];
                            -g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum::<f64>() / (kk * kk)
                        })
                        .collect();
                    let da = g
                        .values()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v / kv.values()[i / c])
                        .collect();
                    send(*k, Tensor::matrix(g.rows(), 1, dk));
                    send(*a, Tensor::matrix(g.rows(), c, da));
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => send(*a, g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let vals = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .zip(y.values())
                        .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                        .collect();
                    send(*a, Tensor::matrix(g.rows(), g.cols(), vals));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut dx = vec![0.0; y.numel()];
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dx[r * m + j] = y.get(r, j) * (g.get(r, j) - dot);
                        }
                    }
                    send(*a, Tensor::matrix(y.rows(), m, dx));
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut dx = vec![0.0; y.numel()];
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for j in 0..m {
                            dx[r * m + j] = g.get(r, j) - y.get(r, j).exp() * gs;
                        }
                    }
                    send(*a, Tensor::matrix(y.rows(), m, dx));
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    send(*a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
                Op::SumRows(a) => {
                    let x = val(*a);
                    let c = x.cols();
                    let vals = (0..x.numel()).map(|i| g.values()[i / c]).collect();
                    send(*a, Tensor::matrix(x.rows(), c, vals));
                }
                Op::SumCols(a) => {
                    let x = val(*a);
                    let c = x.cols();
                    let vals = (0..x.numel()).map(|i| g.values()[i % c]).collect();
                    send(*a, Tensor::matrix(x.rows(), c, vals));
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Reshape(a) => {
                    let x = val(*a);
                    send(*a, Tensor::matrix(x.rows(), x.cols(), g.into_values()));
                }
                Op::GatherRows(a, idx) => {
                    let x = val(*a);
                    let c = x.cols();
                    let mut dx = Tensor::zeros(x.rows(), c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    send(*a, dx);
                }
                Op::ConcatCols(ids) => {
                    let mut off = 0;
                    for &p in ids {
                        let c = val(p).cols();
                        let mut part = Vec::with_capacity(g.rows() * c);
                        for r in 0..g.rows() {
                            part.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        send(p, Tensor::matrix(g.rows(), c, part));
                        off += c;
                    }
                }
                Op::SegmentWeightedSum { alpha, values } => {
                    let (a, x) = (val(*alpha), val(*values));
                    let (n, k, d) = (a.rows(), a.cols(), x.cols());
                    let mut da = vec![0.0; n * k];
                    let mut dxv = vec![0.0; x.numel()];
                    for v in 0..n {
                        let gv = g.row(v);
                        for j in 0..k {
                            let row = v * k + j;
                            da[v * k + j] = gv.iter().zip(x.row(row)).map(|(p, q)| p * q).sum();
                            let w = a.get(v, j);
                            for (dd, &ge) in dxv[row * d..(row + 1) * d].iter_mut().zip(gv) {
                                *dd += w * ge;
                            }
                        }
                    }
                    send(*alpha, Tensor::matrix(n, k, da));
                    send(*values, Tensor::matrix(x.rows(), d, dxv));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gam = val(*gamma);
                    let (n, d) = (g.rows(), g.cols());
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += g.get(r, j) * xhat.get(r, j);
                            db[j] += g.get(r, j);
                        }
                    }
                    let mut dx = Tensor::zeros(n, d);
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..d {
                            let scale = gam.values()[j] * inv_std[j];
                            let v = if *batch_stats {
                                scale / nf * (nf * g.get(r, j) - db[j] - xhat.get(r, j) * dg[j])
                            } else {
                                scale * g.get(r, j)
                            };
                            dx.set(r, j, v);
                        }
                    }
                    send(*gamma, Tensor::new(gam.shape().to_vec(), dg)?);
                    send(*beta, Tensor::new(val(*beta).shape().to_vec(), db)?);
                    send(*x, dx);
                }
                Op::Solve { m, b, lu } => {
                    let db = lu.solve_transpose(&g)?;
                    if nodes[*m].requires_grad {
                        let xt = node.value.transpose();
                        let dm = db.matmul(&xt)?.map(|v| -v);
                        send(*m, dm);
                    }
                    send(*b, db);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.values_mut().iter_mut().zip(t.values()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}
