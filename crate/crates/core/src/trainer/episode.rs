use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Mode};
use crate::aggnet::{build_candidates, sample_neighbors, EpisodeNeighborhood};
use crate::dataio::{Dataset, Domain};
use crate::error::{Result, TggError};
use crate::propagate::LabelMatrix;
use crate::protograph::PrototypeGraph;
use crate::synth::ConditionalSynthesizer;
use crate::tensor::Tensor;

/// SplitMix64 finalizer over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What an episode is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeKind {
    Train,
    /// Held-out seen instances against synthesized support only.
    Validation,
    Test(Mode),
}

/// Support rows first (`num_support` of them), then queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    /// Global class id of each local class column.
    pub classes: Vec<usize>,
    /// Whether each local class is unseen.
    pub unseen_class: Vec<bool>,
    pub features: Tensor,
    /// Local class of every node.
    pub labels: Vec<usize>,
    /// Dataset row of each node; `None` for synthesized features.
    pub sources: Vec<Option<usize>>,
    pub num_support: usize,
    /// Global classes a prediction may choose from.
    pub label_space: Vec<usize>,
    pub neighborhood: EpisodeNeighborhood,
}

impl Episode {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn query_rows(&self) -> Vec<usize> {
        (self.num_support..self.num_nodes()).collect()
    }

    /// Global class of support nodes; queries are unknown.
    pub fn known_classes(&self) -> Vec<Option<usize>> {
        (0..self.num_nodes())
            .map(|i| (i < self.num_support).then(|| self.classes[self.labels[i]]))
            .collect()
    }

    pub fn global_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| self.classes[l]).collect()
    }

    /// Support rows labeled, queries unlabeled.
    pub fn support_labels(&self) -> LabelMatrix {
        let rows: Vec<Option<usize>> = (0..self.num_nodes())
            .map(|i| (i < self.num_support).then_some(self.labels[i]))
            .collect();
        LabelMatrix::new(&rows, self.num_classes()).expect("labels are local")
    }

    /// Every node labeled with its ground truth.
    pub fn full_labels(&self) -> LabelMatrix {
        let rows: Vec<Option<usize>> = self.labels.iter().copied().map(Some).collect();
        LabelMatrix::new(&rows, self.num_classes()).expect("labels are local")
    }

    /// `(seen, unseen)` node masks by class domain.
    pub fn domain_masks(&self) -> (Vec<bool>, Vec<bool>) {
        let unseen: Vec<bool> = self.labels.iter().map(|&l| self.unseen_class[l]).collect();
        (unseen.iter().map(|u| !u).collect(), unseen)
    }
}

struct Builder<'a> {
    ds: &'a Dataset,
    synth: &'a ConditionalSynthesizer,
    rng: ChaCha8Rng,
    classes: Vec<usize>,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sources: Vec<Option<usize>>,
}

impl<'a> Builder<'a> {
    fn real(&mut self, local: usize, row: usize) {
        self.rows.push(self.ds.feature(row).to_vec());
        self.labels.push(local);
        self.sources.push(Some(row));
    }

    fn dummy(&mut self, local: usize, count: usize) -> Result<()> {
        let x = self.synth.sample_with(self.classes[local], count, &mut self.rng)?;
        for r in 0..count {
            self.rows.push(x.row(r).to_vec());
            self.labels.push(local);
            self.sources.push(None);
        }
        Ok(())
    }

    /// `count` distinct rows of `pool`, removed from it.
    fn take(&mut self, pool: &mut Vec<usize>, count: usize, class: usize) -> Result<Vec<usize>> {
        if pool.len() < count {
            return Err(TggError::Episode(format!(
                "class {} has {} available instances, need {count}",
                self.ds.class_names()[class],
                pool.len()
            )));
        }
        pool.shuffle(&mut self.rng);
        Ok(pool.split_off(pool.len() - count))
    }
}

/// Builds an episode; deterministic in `(inputs, seed)`.
pub fn build_episode(
    ds: &Dataset,
    graph: &PrototypeGraph,
    synth: &ConditionalSynthesizer,
    cfg: &ExperimentConfig,
    kind: EpisodeKind,
    seed: u64,
) -> Result<Episode> {
    let mut b = Builder {
        ds,
        synth,
        rng: ChaCha8Rng::seed_from_u64(seed),
        classes: Vec::new(),
        rows: Vec::new(),
        labels: Vec::new(),
        sources: Vec::new(),
    };
    let k = cfg.k_shot;
    let splits = ds.splits();
    let fsl = ds.few_shot_k().is_some();
    let unseen_support = |b: &mut Builder, local: usize, class: usize| -> Result<()> {
        let mut real = if fsl {
            ds.instances_of(&splits.train, class)
        } else {
            Vec::new()
        };
        real.truncate(k);
        for &r in &real {
            b.real(local, r);
        }
        b.dummy(local, cfg.dummies().saturating_sub(real.len()))
    };

    let label_space: Vec<usize>;
    match kind {
        EpisodeKind::Train => {
            let seen: Vec<usize> = ds
                .seen_classes()
                .iter()
                .copied()
                .filter(|&c| ds.instances_of(&splits.train, c).len() >= k)
                .collect();
            let unseen = ds.unseen_classes();
            let (&s0, &u0) = match (seen.choose(&mut b.rng), unseen.choose(&mut b.rng)) {
                (Some(s), Some(u)) => (s, u),
                _ => return Err(TggError::Episode(format!("no seen class with {k} train instances"))),
            };
            let mut rest: Vec<usize> = seen
                .iter()
                .chain(unseen)
                .copied()
                .filter(|&c| c != s0 && c != u0)
                .collect();
            rest.shuffle(&mut b.rng);
            let mut classes = vec![s0, u0];
            classes.extend(rest.into_iter().take(cfg.n_way.saturating_sub(2)));
            classes.shuffle(&mut b.rng);
            b.classes = classes.clone();

            let mut pools: Vec<Vec<usize>> = Vec::with_capacity(classes.len());
            for (local, &c) in classes.iter().enumerate() {
                if ds.domain(c) == Domain::Seen {
                    let mut pool = ds.instances_of(&splits.train, c);
                    for r in b.take(&mut pool, k, c)? {
                        b.real(local, r);
                    }
                    pools.push(pool);
                } else {
                    unseen_support(&mut b, local, c)?;
                    pools.push(Vec::new());
                }
            }
            let num_support = b.rows.len();
            for _ in 0..cfg.queries {
                let eligible: Vec<usize> = (0..classes.len())
                    .filter(|&l| match ds.domain(classes[l]) {
                        Domain::Seen => !pools[l].is_empty(),
                        Domain::Unseen => !fsl,
                    })
                    .collect();
                let Some(&local) = eligible.choose(&mut b.rng) else {
                    break;
                };
                if ds.domain(classes[local]) == Domain::Seen {
                    let i = b.rng.random_range(0..pools[local].len());
                    let r = pools[local].swap_remove(i);
                    b.real(local, r);
                } else {
                    b.dummy(local, 1)?;
                }
            }
            label_space = classes.clone();
            return finish(b, num_support, label_space, graph, cfg, seed);
        }
        EpisodeKind::Validation => {
            let classes: Vec<usize> = if ds.val_classes().is_empty() {
                ds.seen_classes().to_vec()
            } else {
                ds.val_classes().to_vec()
            };
            b.classes = classes.clone();
            for local in 0..classes.len() {
                b.dummy(local, cfg.dummies())?;
            }
            let num_support = b.rows.len();
            let mut pool: Vec<usize> = splits
                .val
                .iter()
                .copied()
                .filter(|&r| classes.contains(&ds.labels()[r]))
                .collect();
            if pool.is_empty() {
                return Err(TggError::Episode("validation split is empty".into()));
            }
            let count = cfg.eval_queries.min(pool.len());
            for r in b.take(&mut pool, count, classes[0])? {
                let local = classes.iter().position(|&c| c == ds.labels()[r]).expect("filtered");
                b.real(local, r);
            }
            label_space = classes.clone();
            finish(b, num_support, label_space, graph, cfg, seed)
        }
        EpisodeKind::Test(mode) => {
            let classes: Vec<usize> = (0..ds.num_classes()).collect();
            b.classes = classes.clone();
            for (local, &c) in classes.iter().enumerate() {
                if ds.domain(c) == Domain::Seen {
                    let mut pool = ds.instances_of(&splits.train, c);
                    for r in b.take(&mut pool, k, c)? {
                        b.real(local, r);
                    }
                } else {
                    unseen_support(&mut b, local, c)?;
                }
            }
            let num_support = b.rows.len();
            let mut unseen_pool = splits.test_unseen.clone();
            let mut seen_pool = splits.test_seen.clone();
            let (n_seen, n_unseen) = match mode {
                Mode::Gzsl => (cfg.eval_queries / 2, cfg.eval_queries - cfg.eval_queries / 2),
                _ => (0, cfg.eval_queries),
            };
            let n_seen = n_seen.min(seen_pool.len());
            let n_unseen = n_unseen.min(unseen_pool.len());
            let mut picked = b.take(&mut seen_pool, n_seen, 0)?;
            picked.extend(b.take(&mut unseen_pool, n_unseen, 0)?);
            for r in picked {
                b.real(ds.labels()[r], r);
            }
            label_space = match mode {
                Mode::Gzsl => classes.clone(),
                _ => ds.unseen_classes().to_vec(),
            };
            finish(b, num_support, label_space, graph, cfg, seed)
        }
    }
}

fn finish(
    b: Builder,
    num_support: usize,
    label_space: Vec<usize>,
    graph: &PrototypeGraph,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Episode> {
    let ds = b.ds;
    let features = Tensor::from_rows(&b.rows)?;
    let unseen_class = b.classes.iter().map(|&c| ds.domain(c) == Domain::Unseen).collect();
    let mut ep = Episode {
        seed,
        unseen_class,
        features,
        labels: b.labels,
        sources: b.sources,
        num_support,
        label_space,
        classes: b.classes,
        neighborhood: EpisodeNeighborhood {
            hops: Vec::new(),
            seed: 0,
        },
    };
    let cand = build_candidates(
        &ep.features,
        &ep.known_classes(),
        graph,
        cfg.k_nn,
        cfg.crop_threshold,
        cfg.include_self,
    );
    ep.neighborhood = sample_neighbors(&cand, &cfg.sample_sizes, derive_seed(seed, 1, 0))?;
    Ok(ep)
}
