//! Attention-based multi-hop neighborhood aggregation.
//!
//! Each layer transforms node states with `W`, scores sampled neighbors with
//! an additive instance-attention vector and with prototype-graph weights,
//! averages the two heads' weighted sums, then applies batch norm and ReLU.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TggError};
use crate::protograph::PrototypeGraph;
use crate::tensor::{BatchNormState, Binder, NormMode, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Candidate neighbor sets, one sorted list per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    pub lists: Vec<Vec<usize>>,
}

/// Cosine similarity between every pair of rows; zero rows have similarity 0.
pub fn cosine_matrix(x: &Tensor) -> Tensor {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut s = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 {
                x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum::<f64>() / denom
            } else {
                0.0
            };
            s.set(i, j, c);
            s.set(j, i, c);
        }
    }
    s
}

/// Each node's `k_nn` most cosine-similar other nodes, ties broken by index.
pub fn knn(x: &Tensor, k_nn: usize) -> Vec<Vec<usize>> {
    let sim = cosine_matrix(x);
    (0..x.rows())
        .map(|i| {
            let mut others: Vec<usize> = (0..x.rows()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sim.get(i, b).total_cmp(&sim.get(i, a)).then(a.cmp(&b)));
            others.truncate(k_nn);
            others
        })
        .collect()
}

/// Union of cosine kNN and prototype-graph class edges, symmetrically closed.
///
/// `classes[i]` is the known class of node `i` (`None` for queries). Two
/// nodes of known classes are linked when their relation weight is positive
/// and at least `threshold`; nodes of the same class always are. With
/// `include_self` every node is its own candidate.
pub fn build_candidates(
    features: &Tensor,
    classes: &[Option<usize>],
    graph: &PrototypeGraph,
    k_nn: usize,
    threshold: f64,
    include_self: bool,
) -> Candidates {
    let n = features.rows();
    let mut adj = vec![vec![false; n]; n];
    for (i, nb) in knn(features, k_nn).into_iter().enumerate() {
        for j in nb {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && classes[i].is_some() {
                let w = graph.relation(classes[i], classes[j]);
                if w > 0.0 && w >= threshold {
                    adj[i][j] = true;
                }
            }
        }
        if include_self {
            adj[i][i] = true;
        }
    }
    Candidates {
        lists: adj
            .into_iter()
            .map(|row| row.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect())
            .collect(),
    }
}

/// Sampled neighbor lists: `hops[k][v]` holds `sizes[k]` node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeNeighborhood {
    pub hops: Vec<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl EpisodeNeighborhood {
    /// Neighborhood of the graph whose node `v` became node `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> EpisodeNeighborhood {
        let hops = self
            .hops
            .iter()
            .map(|lists| {
                let mut out = vec![Vec::new(); lists.len()];
                for (v, nb) in lists.iter().enumerate() {
                    out[perm[v]] = nb.iter().map(|&u| perm[u]).collect();
                }
                out
            })
            .collect();
        EpisodeNeighborhood { hops, seed: self.seed }
    }

    pub fn flat(&self, hop: usize) -> Vec<usize> {
        self.hops[hop].iter().flatten().copied().collect()
    }
}

/// Uniform sampling per node and hop: without replacement when the candidate
/// set is large enough, with replacement otherwise.
pub fn sample_neighbors(cand: &Candidates, sizes: &[usize], seed: u64) -> Result<EpisodeNeighborhood> {
    if let Some(node) = cand.lists.iter().position(Vec::is_empty) {
        return Err(TggError::Connectivity { node });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hops = sizes
        .iter()
        .map(|&size| {
            cand.lists
                .iter()
                .map(|c| {
                    if c.len() >= size {
                        let mut picked: Vec<usize> = c.choose_multiple(&mut rng, size).copied().collect();
                        picked.shuffle(&mut rng);
                        picked
                    } else {
                        (0..size).map(|_| c[rng.random_range(0..c.len())]).collect()
                    }
                })
                .collect()
        })
        .collect();
    Ok(EpisodeNeighborhood { hops, seed })
}

/// `softmax_u LeakyReLU(a_lᵀ z_v + a_rᵀ z_u)` where `a = [a_l; a_r]`.
pub fn instance_attention(z_v: &[f64], z_neighbors: &[&[f64]], a: &[f64], slope: f64) -> Vec<f64> {
    let d = z_v.len();
    let left: f64 = a[..d].iter().zip(z_v).map(|(x, y)| x * y).sum();
    let scores: Vec<f64> = z_neighbors
        .iter()
        .map(|z| {
            let e = left + a[d..].iter().zip(z.iter()).map(|(x, y)| x * y).sum::<f64>();
            if e >= 0.0 {
                e
            } else {
                slope * e
            }
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Class-head weights `[n x k]` for one hop.
pub fn class_attention(graph: &PrototypeGraph, classes: &[Option<usize>], lists: &[Vec<usize>]) -> Tensor {
    let k = lists.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(lists.len() * k);
    for (v, nb) in lists.iter().enumerate() {
        let nb_classes: Vec<Option<usize>> = nb.iter().map(|&u| classes[u]).collect();
        out.extend(graph.class_attention_row(classes[v], &nb_classes));
    }
    Tensor::matrix(lists.len(), k, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateLayer {
    pub weight: ParamId,
    /// `[2·d_out x 1]`, left half scores the center node, right half the neighbor.
    pub attention: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub norm: BatchNormState,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Per-forward switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggOptions {
    pub attention: bool,
    pub slope: f64,
    pub mode: NormMode,
}

impl Default for AggOptions {
    fn default() -> Self {
        AggOptions {
            attention: true,
            slope: DEFAULT_LEAKY_SLOPE,
            mode: NormMode::Train,
        }
    }
}

/// Glorot-uniform `[rows x cols]`.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
    )
}

impl AggregateLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        AggregateLayer {
            weight: store.register(format!("{prefix}.weight"), glorot(rng, in_dim, out_dim)),
            attention: store.register(format!("{prefix}.attention"), glorot(rng, 2 * out_dim, 1)),
            gamma: store.register(format!("{prefix}.bn_gamma"), Tensor::filled(1, out_dim, 1.0)),
            beta: store.register(format!("{prefix}.bn_beta"), Tensor::zeros(1, out_dim)),
            norm: BatchNormState::new(out_dim),
            in_dim,
            out_dim,
        }
    }

    /// Combined head weights `0.5·(α_I + α_C)` and the transformed states `Z`.
    pub fn attention_weights<'t>(
        &self,
        b: &Binder<'t, '_>,
        h: Var<'t>,
        lists: &[Vec<usize>],
        class_alpha: &Tensor,
        opts: AggOptions,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = b.tape();
        let z = h.matmul(&b.get(self.weight))?;
        let n = lists.len();
        let k = class_alpha.cols();
        let instance = if opts.attention {
            let a = b.get(self.attention);
            let d = self.out_dim;
            let left: Vec<usize> = (0..d).collect();
            let right: Vec<usize> = (d..2 * d).collect();
            let s_l = z.matmul(&a.gather_rows(&left)?)?;
            let s_r = z.matmul(&a.gather_rows(&right)?)?;
            let flat: Vec<usize> = lists.iter().flatten().copied().collect();
            let scores = s_r.gather_rows(&flat)?.reshape(n, k)?.add_col(&s_l)?;
            scores.leaky_relu(opts.slope).softmax_rows(None)?
        } else {
            tape.constant(Tensor::filled(n, k, 1.0 / k as f64))
        };
        let class = if opts.attention {
            tape.constant(class_alpha.clone())
        } else {
            tape.constant(Tensor::filled(n, k, 1.0 / k as f64))
        };
        Ok((instance.add(&class)?.scale(0.5), z))
    }

    pub fn forward<'t>(
        &mut self,
        b: &Binder<'t, '_>,
        h: Var<'t>,
        lists: &[Vec<usize>],
        class_alpha: &Tensor,
        opts: AggOptions,
    ) -> Result<Var<'t>> {
        let (alpha, z) = self.attention_weights(b, h, lists, class_alpha, opts)?;
        let flat: Vec<usize> = lists.iter().flatten().copied().collect();
        let agg = alpha.segment_weighted_sum(&z.gather_rows(&flat)?)?;
        let normed = agg.batch_norm(&b.get(self.gamma), &b.get(self.beta), &mut self.norm, opts.mode)?;
        Ok(normed.relu())
    }
}

/// Stack of aggregate layers, one per sampled hop.
#[derive(Debug, Clone, PartialEq)]
pub struct AggNet {
    pub layers: Vec<AggregateLayer>,
}

impl AggNet {
    pub fn new(store: &mut ParamStore, in_dim: usize, dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = in_dim;
        for (k, &d) in dims.iter().enumerate() {
            layers.push(AggregateLayer::new(store, &format!("agg{k}"), prev, d, rng));
            prev = d;
        }
        AggNet { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<'t>(
        &mut self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
        nb: &EpisodeNeighborhood,
        classes: &[Option<usize>],
        graph: &PrototypeGraph,
        opts: AggOptions,
    ) -> Result<Var<'t>> {
        if nb.hops.len() != self.layers.len() {
            return Err(TggError::Config(format!(
                "{} aggregation layers but {} sampled hops",
                self.layers.len(),
                nb.hops.len()
            )));
        }
        let mut h = x;
        for (layer, lists) in self.layers.iter_mut().zip(&nb.hops) {
            let alpha_c = class_attention(graph, classes, lists);
            h = layer.forward(b, h, lists, &alpha_c, opts)?;
        }
        Ok(h)
    }

    pub fn norm_states(&self) -> Vec<&BatchNormState> {
        self.layers.iter().map(|l| &l.norm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::tensor::Tape;
    use crate::testutil::{grad_check, probe, random_tensor, rng};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("c{k}")).collect()
    }

    #[test]
    fn identical_rows_are_mutual_nearest() {
        let x = Tensor::matrix(4, 2, vec![1.0, 0.2, -1.0, 0.5, 1.0, 0.2, 0.0, -1.0]);
        let nn = knn(&x, 1);
        assert_eq!(nn[0], vec![2]);
        assert_eq!(nn[2], vec![0]);
    }

    #[test]
    fn empty_graph_gives_knn_closure_only() {
        let mut r = rng(1);
        let x = random_tensor(&mut r, 8, 3);
        let g = PrototypeGraph::empty(names(8));
        let classes: Vec<Option<usize>> = (0..8).map(Some).collect();
        let cand = build_candidates(&x, &classes, &g, 1, 0.0, false);
        let nn = knn(&x, 1);
        for v in 0..8 {
            let mut want: Vec<usize> = nn[v].clone();
            want.extend((0..8).filter(|&u| nn[u] == vec![v]));
            want.sort_unstable();
            want.dedup();
            assert_eq!(cand.lists[v], want);
        }
    }

    #[test]
    fn class_edges_respect_threshold() {
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]);
        let g = PrototypeGraph::from_edges(&[("c0", "c1", 0.4)], &names(3)).unwrap();
        let classes = [Some(0), Some(1), Some(2)];
        let low = build_candidates(&x, &classes, &g, 0, 0.3, false);
        assert_eq!(low.lists, vec![vec![1], vec![0], vec![]]);
        let high = build_candidates(&x, &classes, &g, 0, 0.5, false);
        assert!(high.lists.iter().all(Vec::is_empty));
        assert!(matches!(
            sample_neighbors(&low, &[2], 0),
            Err(TggError::Connectivity { node: 2 })
        ));
    }

    #[test]
    fn same_class_support_always_linked() {
        let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let g = PrototypeGraph::from_edges(&[("c0", "c1", 0.4)], &names(2)).unwrap();
        let classes = [Some(0), Some(1), Some(0), None];
        let c = build_candidates(&x, &classes, &g, 0, 1.0, false);
        assert_eq!(c.lists, vec![vec![2], vec![], vec![0], vec![]]);
        let c = build_candidates(&x, &classes, &g, 0, 0.0, false);
        assert_eq!(c.lists, vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![]]);
    }

    #[test]
    fn knn_candidates_mostly_share_class() {
        let ds = generate_synthetic(&SyntheticSpec::default())
            .unwrap()
            .standardize()
            .unwrap();
        let rows: Vec<usize> = (0..ds.num_instances()).step_by(3).collect();
        let x = ds.features().select_rows(&rows);
        let nn = knn(&x, 5);
        let (mut same, mut total) = (0, 0);
        for (v, nb) in nn.iter().enumerate() {
            for &u in nb {
                same += usize::from(ds.labels()[rows[u]] == ds.labels()[rows[v]]);
                total += 1;
            }
        }
        assert!(same as f64 >= 0.8 * total as f64, "{same}/{total}");
    }

    #[test]
    fn sampling_with_replacement_repeats() {
        let cand = Candidates {
            lists: vec![vec![1], vec![0]],
        };
        let nb = sample_neighbors(&cand, &[3], 4).unwrap();
        assert_eq!(nb.hops[0][0], vec![1, 1, 1]);
        assert_eq!(nb, sample_neighbors(&cand, &[3], 4).unwrap());
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        let c = 5;
        let cand = Candidates {
            lists: vec![(0..c).collect()],
        };
        let trials = 1000;
        let mut first = vec![0usize; c];
        let mut included = vec![0usize; c];
        for seed in 0..trials {
            let full = sample_neighbors(&cand, &[c], seed).unwrap();
            let mut sorted = full.hops[0][0].clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..c).collect::<Vec<_>>());
            first[full.hops[0][0][0]] += 1;
            for &u in &sample_neighbors(&cand, &[2], seed).unwrap().hops[0][0] {
                included[u] += 1;
            }
        }
        let check = |count: usize, p: f64| {
            let sd = (trials as f64 * p * (1.0 - p)).sqrt();
            assert!((count as f64 - trials as f64 * p).abs() <= 3.0 * sd, "{count} vs p={p}");
        };
        for u in 0..c {
            check(first[u], 1.0 / c as f64);
            check(included[u], 2.0 / c as f64);
        }
    }

    #[test]
    fn instance_attention_cases() {
        let z_v = [0.3, -0.2];
        let n1 = [1.0, 2.0];
        let n2 = [-0.5, 0.1];
        let zero = instance_attention(&z_v, &[&n1, &n2], &[0.0; 4], 0.2);
        assert_eq!(zero, vec![0.5, 0.5]);
        let dup = instance_attention(&z_v, &[&n1, &n1, &n2], &[0.4, 0.1, -0.3, 0.8], 0.2);
        assert_eq!(dup[0], dup[1]);
        let a = [1.0, 0.0, 1.0, 0.0];
        let w = instance_attention(&z_v, &[&n1, &n2], &a, 0.2);
        let e1: f64 = 0.3 + 1.0;
        let e2: f64 = 0.2 * (0.3 - 0.5);
        let z = e1.exp() + e2.exp();
        assert!((w[0] - e1.exp() / z).abs() < 1e-10);
        assert!((w[1] - e2.exp() / z).abs() < 1e-10);
    }

    struct Fixture {
        store: ParamStore,
        net: AggNet,
        x: Tensor,
        nb: EpisodeNeighborhood,
        classes: Vec<Option<usize>>,
        graph: PrototypeGraph,
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let net = AggNet::new(&mut store, 5, &[6, 4], &mut r);
        let x = random_tensor(&mut r, n, 5);
        let classes: Vec<Option<usize>> = (0..n).map(|i| if i % 4 == 3 { None } else { Some(i % 3) }).collect();
        let attrs = random_tensor(&mut r, 3, 4).map(f64::abs);
        let graph = PrototypeGraph::from_attributes(&attrs, &names(3)).unwrap();
        let cand = build_candidates(&x, &classes, &graph, 3, 0.2, true);
        let nb = sample_neighbors(&cand, &[4, 3], seed).unwrap();
        Fixture {
            store,
            net,
            x,
            nb,
            classes,
            graph,
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for seed in 0..20 {
            let mut f = fixture(10, seed);
            let tape = Tape::new();
            let b = Binder::new(&tape, &f.store);
            let mut h = tape.constant(f.x.clone());
            for (layer, lists) in f.net.layers.iter_mut().zip(&f.nb.hops) {
                let ac = class_attention(&f.graph, &f.classes, lists);
                let (alpha, _) = layer
                    .attention_weights(&b, h, lists, &ac, AggOptions::default())
                    .unwrap();
                for row in [alpha.value(), std::rc::Rc::new(ac)] {
                    for v in 0..row.rows() {
                        assert!((row.row(v).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    }
                }
                h = layer
                    .forward(
                        &b,
                        h,
                        lists,
                        &class_attention(&f.graph, &f.classes, lists),
                        AggOptions::default(),
                    )
                    .unwrap();
            }
        }
    }

    #[test]
    fn single_neighbor_collapse() {
        let mut f = fixture(6, 2);
        let lists: Vec<Vec<usize>> = (0..6).map(|v| vec![(v + 1) % 6]).collect();
        let layer = &mut f.net.layers[0];
        let tape = Tape::new();
        let b = Binder::new(&tape, &f.store);
        let ac = class_attention(&f.graph, &f.classes, &lists);
        let out = layer
            .forward(&b, tape.constant(f.x.clone()), &lists, &ac, AggOptions::default())
            .unwrap();
        let mut state = BatchNormState::new(layer.out_dim);
        let shifted = f.x.select_rows(&lists.iter().map(|l| l[0]).collect::<Vec<_>>());
        let want = tape
            .constant(shifted)
            .matmul(&b.get(layer.weight))
            .unwrap()
            .batch_norm(&b.get(layer.gamma), &b.get(layer.beta), &mut state, NormMode::Train)
            .unwrap()
            .relu();
        assert!(out.value().max_abs_diff(&want.value()) < 1e-12);
    }

    #[test]
    fn coinciding_heads_equal_single_head() {
        let mut f = fixture(8, 3);
        let layer = &mut f.net.layers[0];
        let lists = &f.nb.hops[0];
        let tape = Tape::new();
        let b = Binder::new(&tape, &f.store);
        let h = tape.constant(f.x.clone());
        let (inst, z) = layer
            .attention_weights(&b, h, lists, &Tensor::zeros(8, 4), AggOptions::default())
            .unwrap();
        // recover α_I = 2·combined − α_C with α_C = 0, then feed it as the class head
        let alpha_i = inst.value().map(|v| 2.0 * v);
        let (both, _) = layer
            .attention_weights(&b, h, lists, &alpha_i, AggOptions::default())
            .unwrap();
        let flat: Vec<usize> = lists.iter().flatten().copied().collect();
        let values = z.gather_rows(&flat).unwrap();
        let multi = both.segment_weighted_sum(&values).unwrap();
        let single = tape.constant(alpha_i).segment_weighted_sum(&values).unwrap();
        assert!(multi.value().max_abs_diff(&single.value()) < 1e-14);
    }

    #[test]
    fn no_attention_is_mean_aggregation() {
        let mut f = fixture(8, 4);
        let layer = &mut f.net.layers[0];
        let lists = &f.nb.hops[0];
        let tape = Tape::new();
        let b = Binder::new(&tape, &f.store);
        let ac = class_attention(&f.graph, &f.classes, lists);
        let opts = AggOptions {
            attention: false,
            ..AggOptions::default()
        };
        let (alpha, _) = layer
            .attention_weights(&b, tape.constant(f.x.clone()), lists, &ac, opts)
            .unwrap();
        assert!(alpha.value().values().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let mut zeroed = f.store.clone();
        zeroed.get_mut(layer.attention).values_mut().fill(0.0);
        let b0 = Binder::new(&tape, &zeroed);
        let (alpha0, _) = layer
            .attention_weights(
                &b0,
                tape.constant(f.x.clone()),
                lists,
                &Tensor::filled(8, 4, 0.25),
                AggOptions::default(),
            )
            .unwrap();
        assert!(alpha0.value().values().iter().all(|&a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn output_shape_and_connectivity() {
        for n in [2, 5, 9] {
            let mut f = fixture(n, n as u64);
            let tape = Tape::new();
            let b = Binder::new(&tape, &f.store);
            let out = f
                .net
                .forward(
                    &b,
                    tape.constant(f.x.clone()),
                    &f.nb,
                    &f.classes,
                    &f.graph,
                    AggOptions::default(),
                )
                .unwrap();
            assert_eq!(out.shape(), vec![n, 4]);
        }
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]);
        let g = PrototypeGraph::empty(names(1));
        let cand = build_candidates(&x, &[Some(0)], &g, 3, 0.0, false);
        assert!(matches!(
            sample_neighbors(&cand, &[2], 0),
            Err(TggError::Connectivity { node: 0 })
        ));
    }

    #[test]
    fn permutation_equivariance() {
        use rand::seq::SliceRandom;
        for seed in 0..5 {
            let f = fixture(9, seed);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng(seed + 50));
            let mut px = Tensor::zeros(9, f.x.cols());
            let mut pclasses = vec![None; 9];
            for v in 0..9 {
                px.row_mut(perm[v]).copy_from_slice(f.x.row(v));
                pclasses[perm[v]] = f.classes[v];
            }
            let pnb = f.nb.permuted(&perm);
            let run = |x: &Tensor, nb: &EpisodeNeighborhood, classes: &[Option<usize>]| {
                let mut net = f.net.clone();
                let tape = Tape::new();
                let b = Binder::new(&tape, &f.store);
                let out = net.forward(
                    &b,
                    tape.constant(x.clone()),
                    nb,
                    classes,
                    &f.graph,
                    AggOptions::default(),
                );
                (*out.unwrap().value()).clone()
            };
            let a = run(&f.x, &f.nb, &f.classes);
            let p = run(&px, &pnb, &pclasses);
            for v in 0..9 {
                for (x, y) in a.row(v).iter().zip(p.row(perm[v])) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn embeddings_finite_over_seeds() {
        for seed in 0..100 {
            let mut f = fixture(7, seed);
            let tape = Tape::new();
            let b = Binder::new(&tape, &f.store);
            let x = f.x.map(|v| v * 50.0);
            let out = f
                .net
                .forward(&b, tape.constant(x), &f.nb, &f.classes, &f.graph, AggOptions::default())
                .unwrap();
            assert!(out.value().is_finite());
        }
    }

    #[test]
    fn two_hop_gradient_check() {
        let f = fixture(12, 11);
        let np = f.store.len();
        let mut inputs: Vec<Tensor> = f.store.values().to_vec();
        inputs.push(f.x.clone());
        let err = grad_check(&inputs, |tape, vars| {
            let b = Binder::from_vars(tape, &f.store, &vars[..np]);
            let mut net = f.net.clone();
            let out = net.forward(&b, vars[np], &f.nb, &f.classes, &f.graph, AggOptions::default())?;
            probe(out, 7)
        });
        assert!(err <= 1e-4, "relative error {err}");
    }
}
