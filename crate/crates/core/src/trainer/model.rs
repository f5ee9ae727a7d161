use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::episode::{derive_seed, Episode};
use crate::aggnet::{AggNet, AggOptions};
use crate::error::{Result, TggError};
use crate::propagate::{argmax_among, dual_propagation_loss, propagate_closed_form};
use crate::protograph::PrototypeGraph;
use crate::relkernel::{kernel_loss, lift_prototype, one_hots, InstanceGraph, RelKernel};
use crate::tensor::{Binder, NormMode, ParamStore, Tape, Tensor, Var};

/// Loss terms of one episode; `total = loss_c + λ_d·loss_d + λ_k·loss_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss_k: f64,
    pub total: f64,
}

/// Differentiable outputs of one episode forward pass.
pub struct Objective<'t> {
    pub adjacency: Var<'t>,
    pub y_star: Var<'t>,
    pub loss_c: Var<'t>,
    pub loss_d: Var<'t>,
    pub loss_k: Var<'t>,
    pub total: Var<'t>,
}

impl Objective<'_> {
    pub fn parts(&self) -> LossParts {
        LossParts {
            loss_c: self.loss_c.item(),
            loss_d: self.loss_d.item(),
            loss_k: self.loss_k.item(),
            total: self.total.item(),
        }
    }
}

/// `−Σ_i log softmax(scale · logits_i)[label_i]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], scale: f64) -> Result<Var<'t>> {
    let c = logits.shape()[1];
    let target = logits.tape().constant(one_hots(labels, c));
    Ok(logits.scale(scale).log_softmax_rows().mul(&target)?.sum().scale(-1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TggModel {
    pub config: ExperimentConfig,
    pub feature_dim: usize,
    pub store: ParamStore,
    pub agg: AggNet,
    pub rel: RelKernel,
}

#[derive(Serialize, Deserialize)]
struct NormStats {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ExperimentConfig,
    feature_dim: usize,
    params: BTreeMap<String, Tensor>,
    norms: Vec<NormStats>,
}

impl TggModel {
    pub fn new(feature_dim: usize, config: &ExperimentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, 0));
        let mut store = ParamStore::new();
        let agg = AggNet::new(&mut store, feature_dim, &config.agg_dims, &mut rng);
        let embed_dim = if config.ablation.no_aggregation {
            feature_dim
        } else {
            agg.out_dim()
        };
        let rel = RelKernel::new(
            &mut store,
            embed_dim,
            &config.gcn_dims,
            config.edge_hidden,
            config.bandwidth,
            &mut rng,
        );
        TggModel {
            config: config.clone(),
            feature_dim,
            store,
            agg,
            rel,
        }
    }

    /// Generated adjacency of the episode.
    pub fn adjacency<'t>(
        &mut self,
        b: &Binder<'t, '_>,
        ep: &Episode,
        graph: &PrototypeGraph,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        let h = self.embed(b, ep, graph, mode)?;
        self.rel.forward(b, h, !self.config.ablation.no_gcn)
    }

    /// Node embeddings fed to the relation kernel.
    pub fn embed<'t>(
        &mut self,
        b: &Binder<'t, '_>,
        ep: &Episode,
        graph: &PrototypeGraph,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        if ep.features.cols() != self.feature_dim {
            return Err(TggError::Dimension {
                op: "episode_features",
                left: vec![ep.num_nodes(), self.feature_dim],
                right: ep.features.shape().to_vec(),
            });
        }
        let x = b.tape().constant(ep.features.clone());
        let h = if cfg.ablation.no_aggregation {
            x
        } else {
            let opts = AggOptions {
                attention: !cfg.ablation.no_attention,
                slope: cfg.leaky_slope,
                mode,
            };
            self.agg
                .forward(b, x, &ep.neighborhood, &ep.known_classes(), graph, opts)?
        };
        Ok(h)
    }

    /// Embeddings and adjacency of `ep` in evaluation mode.
    pub fn instance_graph(&mut self, ep: &Episode, graph: &PrototypeGraph) -> Result<InstanceGraph> {
        let tape = Tape::new();
        let store = self.store.clone();
        let b = Binder::new(&tape, &store);
        let h = self.embed(&b, ep, graph, NormMode::Eval)?;
        let a = self.rel.forward(&b, h, !self.config.ablation.no_gcn)?;
        let label_space = ep
            .label_space
            .iter()
            .filter_map(|g| ep.classes.iter().position(|c| c == g))
            .collect();
        let (embeddings, adjacency) = ((*h.value()).clone(), (*a.value()).clone());
        Ok(InstanceGraph {
            embeddings,
            adjacency,
            known: (0..ep.num_nodes())
                .map(|i| (i < ep.num_support).then_some(ep.labels[i]))
                .collect(),
            truth: Some(ep.labels.clone()),
            unseen: ep.domain_masks().1,
            classes: ep.num_classes(),
            label_space,
        })
    }

    /// Full objective with support-only labels seeding the propagation.
    pub fn objective<'t>(
        &mut self,
        b: &Binder<'t, '_>,
        ep: &Episode,
        graph: &PrototypeGraph,
        mode: NormMode,
    ) -> Result<Objective<'t>> {
        let a = self.adjacency(b, ep, graph, mode)?;
        let cfg = &self.config;
        let tape = b.tape();
        let support = ep.support_labels();
        let y_star = propagate_closed_form(a, support.tensor(), cfg.mu)?;
        let loss_c = cross_entropy(y_star, &ep.labels, cfg.logit_scale)?;

        let zero = || tape.constant(Tensor::scalar(0.0));
        let loss_d = if cfg.ablation.no_dual {
            zero()
        } else {
            let (seen, unseen) = ep.domain_masks();
            let s = ep.num_support;
            let seen: Vec<bool> = seen.iter().enumerate().map(|(i, &m)| m && i < s).collect();
            let unseen: Vec<bool> = unseen.iter().enumerate().map(|(i, &m)| m && i < s).collect();
            dual_propagation_loss(a, &support, &seen, &unseen, cfg.mu)?
        };
        let loss_k = if cfg.ablation.no_kernel {
            zero()
        } else {
            let template = tape.constant(lift_prototype(graph, &ep.global_labels()));
            kernel_loss(a, template, &one_hots(&ep.labels, ep.num_classes()), cfg.wl_iterations)?
        };
        let total = loss_c
            .add(&loss_d.scale(cfg.lambda_dual))?
            .add(&loss_k.scale(cfg.lambda_kernel))?;
        Ok(Objective {
            adjacency: a,
            y_star,
            loss_c,
            loss_d,
            loss_k,
            total,
        })
    }

    /// Loss values in training mode; updates batch-norm running statistics.
    pub fn episode_loss(&mut self, ep: &Episode, graph: &PrototypeGraph) -> Result<LossParts> {
        let tape = Tape::new();
        let store = self.store.clone();
        let b = Binder::new(&tape, &store);
        Ok(self.objective(&b, ep, graph, NormMode::Train)?.parts())
    }

    /// Propagated scores `Y*` in evaluation mode.
    pub fn scores(&mut self, ep: &Episode, graph: &PrototypeGraph) -> Result<Tensor> {
        let tape = Tape::new();
        let store = self.store.clone();
        let b = Binder::new(&tape, &store);
        let a = self.adjacency(&b, ep, graph, NormMode::Eval)?;
        let y_star = propagate_closed_form(a, ep.support_labels().tensor(), self.config.mu)?;
        let v = (*y_star.value()).clone();
        Ok(v)
    }

    /// Predicted local class of every query, restricted to the episode label space.
    pub fn predict(&mut self, ep: &Episode, graph: &PrototypeGraph) -> Result<Vec<usize>> {
        let y = self.scores(ep, graph)?;
        let allowed: Vec<usize> = ep
            .label_space
            .iter()
            .map(|&g| {
                ep.classes
                    .iter()
                    .position(|&c| c == g)
                    .expect("label space is in episode")
            })
            .collect();
        Ok(ep
            .query_rows()
            .into_iter()
            .map(|q| argmax_among(y.row(q), &allowed).expect("label space is non-empty"))
            .collect())
    }

    pub fn to_checkpoint_json(&self) -> String {
        let params = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.get(id).clone()))
            .collect();
        let norms = self
            .agg
            .norm_states()
            .into_iter()
            .map(|n| NormStats {
                running_mean: n.running_mean.clone(),
                running_var: n.running_var.clone(),
            })
            .collect();
        let ck = Checkpoint {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            params,
            norms,
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        ck.config.validate()?;
        let mut model = TggModel::new(ck.feature_dim, &ck.config);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = ck
                .params
                .get(&name)
                .ok_or_else(|| TggError::Schema(format!("checkpoint has no parameter {name}")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(TggError::Dimension {
                    op: "load_checkpoint",
                    left: model.store.get(id).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *model.store.get_mut(id) = t.clone();
        }
        if ck.norms.len() != model.agg.layers.len() {
            return Err(TggError::Schema("batch-norm statistics do not match the layers".into()));
        }
        for (layer, n) in model.agg.layers.iter_mut().zip(ck.norms) {
            if n.running_mean.len() != layer.out_dim || n.running_var.len() != layer.out_dim {
                return Err(TggError::Schema("batch-norm statistics have the wrong width".into()));
            }
            layer.norm.running_mean = n.running_mean;
            layer.norm.running_var = n.running_var;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Dataset, SyntheticSpec};
    use crate::synth::{ConditionalSynthesizer, DEFAULT_RIDGE};
    use crate::testutil::grad_check;
    use crate::trainer::config::Ablation;
    use crate::trainer::episode::{build_episode, EpisodeKind};

    fn setup() -> (Dataset, PrototypeGraph, ConditionalSynthesizer) {
        let ds = generate_synthetic(&SyntheticSpec::default())
            .unwrap()
            .standardize()
            .unwrap();
        let g = PrototypeGraph::from_attributes(ds.attributes(), ds.class_names()).unwrap();
        let s = ConditionalSynthesizer::fit(&ds, DEFAULT_RIDGE).unwrap();
        (ds, g, s)
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            agg_dims: vec![8, 6],
            gcn_dims: vec![5],
            edge_hidden: 4,
            sample_sizes: vec![3, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_lambdas_give_classification_loss() {
        let (ds, g, s) = setup();
        let cfg = ExperimentConfig {
            lambda_dual: 0.0,
            lambda_kernel: 0.0,
            ..small_cfg()
        };
        let ep = build_episode(&ds, &g, &s, &cfg, EpisodeKind::Train, 3).unwrap();
        let mut m = TggModel::new(ds.feature_dim(), &cfg);
        let p = m.episode_loss(&ep, &g).unwrap();
        assert_eq!(p.total, p.loss_c);
        assert!(p.loss_d > 0.0 && p.loss_k >= 0.0);
    }

    #[test]
    fn objective_decomposes() {
        let (ds, g, s) = setup();
        let cfg = ExperimentConfig {
            lambda_dual: 0.3,
            lambda_kernel: 1.7,
            ..small_cfg()
        };
        for seed in 0..10 {
            let ep = build_episode(&ds, &g, &s, &cfg, EpisodeKind::Train, seed).unwrap();
            let mut m = TggModel::new(ds.feature_dim(), &cfg);
            let p = m.episode_loss(&ep, &g).unwrap();
            let recomposed = p.loss_c + 0.3 * p.loss_d + 1.7 * p.loss_k;
            assert!((p.total - recomposed).abs() <= 1e-12 * p.total.abs().max(1.0));
        }
    }

    #[test]
    fn cross_entropy_floor_with_saturated_logits() {
        let tape = Tape::new();
        let labels = [2, 0, 1, 1];
        let y = tape.constant(one_hots(&labels, 3));
        let loss = cross_entropy(y, &labels, 20.0).unwrap().item();
        assert!(loss >= 0.0 && loss <= 1e-6, "{loss}");
        let wrong = cross_entropy(y, &[0, 1, 2, 0], 20.0).unwrap().item();
        assert!(wrong > 70.0);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let loss = cross_entropy(y, &[1], 1.0).unwrap().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn full_objective_gradient_two_way_one_shot() {
        let (ds, g, s) = setup();
        let cfg = ExperimentConfig {
            n_way: 2,
            k_shot: 1,
            queries: 2,
            agg_dims: vec![4, 3],
            gcn_dims: vec![3],
            edge_hidden: 3,
            sample_sizes: vec![2, 2],
            ..ExperimentConfig::default()
        };
        let ep = build_episode(&ds, &g, &s, &cfg, EpisodeKind::Train, 5).unwrap();
        assert_eq!(ep.num_nodes(), 4);
        let model = TggModel::new(ds.feature_dim(), &cfg);
        let inputs = model.store.values().to_vec();
        let err = grad_check(&inputs, |tape, vars| {
            let mut m = model.clone();
            let store = m.store.clone();
            let b = Binder::from_vars(tape, &store, vars);
            Ok(m.objective(&b, &ep, &g, NormMode::Train)?.total)
        });
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn ablations_zero_their_terms() {
        let (ds, g, s) = setup();
        for name in Ablation::NAMES {
            let cfg = ExperimentConfig {
                ablation: Ablation::without(name).unwrap(),
                ..small_cfg()
            };
            let ep = build_episode(&ds, &g, &s, &cfg, EpisodeKind::Train, 1).unwrap();
            let mut m = TggModel::new(ds.feature_dim(), &cfg);
            let p = m.episode_loss(&ep, &g).unwrap();
            assert!(p.total.is_finite());
            assert_eq!(p.loss_d == 0.0, name == "dual", "{name}");
            assert_eq!(p.loss_k == 0.0, name == "kernel", "{name}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, g, s) = setup();
        let cfg = small_cfg();
        let ep = build_episode(&ds, &g, &s, &cfg, EpisodeKind::Train, 2).unwrap();
        let mut m = TggModel::new(ds.feature_dim(), &cfg);
        m.episode_loss(&ep, &g).unwrap();
        let back = TggModel::from_checkpoint_json(&m.to_checkpoint_json()).unwrap();
        assert_eq!(back, m);
        let mut other = cfg.clone();
        other.agg_dims = vec![7, 6];
        let mut json: serde_json::Value = serde_json::from_str(&m.to_checkpoint_json()).unwrap();
        json["config"] = serde_json::to_value(&other).unwrap();
        assert!(TggModel::from_checkpoint_json(&json.to_string()).is_err());
    }
}
