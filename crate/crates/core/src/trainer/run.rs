use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, GraphSource, Mode};
use super::episode::{build_episode, derive_seed, EpisodeKind};
use super::model::TggModel;
use crate::dataio::{generate_synthetic, Dataset};
use crate::error::{Result, TggError};
use crate::propagate::argmax_among;
use crate::protograph::PrototypeGraph;
use crate::synth::ConditionalSynthesizer;
use crate::tensor::{AdamState, Binder, NormMode, Tape};

const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const VAL_STREAM: u64 = 4;

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Standardized dataset, full and cropped prototype graphs, and fitted synthesizer.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub full_graph: PrototypeGraph,
    /// `full_graph` cropped at `threshold`.
    pub graph: PrototypeGraph,
    pub threshold: f64,
    pub synth: ConditionalSynthesizer,
}

impl Prepared {
    pub fn new(dataset: Dataset, full_graph: PrototypeGraph, synth: ConditionalSynthesizer, threshold: f64) -> Self {
        Prepared {
            graph: full_graph.crop(threshold),
            dataset,
            full_graph,
            threshold,
            synth,
        }
    }

    pub fn with_threshold(&self, threshold: f64) -> Prepared {
        Prepared {
            graph: self.full_graph.crop(threshold),
            threshold,
            ..self.clone()
        }
    }

    /// Loads or generates the data, standardizes it, adds few-shot support in
    /// few-shot mode, builds the graph and fits the synthesizer.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Prepared> {
        let raw = match &cfg.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Files {
                features,
                attributes,
                splits,
            } => Dataset::load(features, attributes, splits)?,
        };
        let mut ds = raw.standardize()?;
        if cfg.mode == Mode::Fsl && ds.few_shot_k().is_none() {
            ds = ds.with_few_shot_support(cfg.fsl_shots, derive_seed(cfg.seed, 5, 0))?;
        }
        let graph = match &cfg.graph {
            GraphSource::Attributes => PrototypeGraph::from_attributes(ds.attributes(), ds.class_names())?,
            GraphSource::EdgeList(p) => PrototypeGraph::from_edge_list(p, ds.class_names())?,
        };
        let synth = ConditionalSynthesizer::fit(&ds, cfg.ridge)?;
        Ok(Prepared::new(ds, graph, synth, cfg.crop_threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub seed: u64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub loss_k: f64,
    pub total: f64,
    /// Query accuracy of the training episode before the update.
    pub acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation check.
    pub model: TggModel,
    pub log: Vec<LogRow>,
    pub best_val_acc: f64,
    pub best_episode: usize,
    pub stopped_early: bool,
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean query accuracy over the fixed validation episodes.
pub fn validate(model: &TggModel, prep: &Prepared) -> Result<f64> {
    let cfg = &model.config;
    let mut m = model.clone();
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..cfg.val_episodes.max(1) {
        let seed = derive_seed(cfg.seed, VAL_STREAM, i as u64);
        let ep = build_episode(
            &prep.dataset,
            &prep.graph,
            &prep.synth,
            cfg,
            EpisodeKind::Validation,
            seed,
        )?;
        let pred = m.predict(&ep, &prep.graph)?;
        for (q, p) in ep.query_rows().into_iter().zip(pred) {
            hit += usize::from(ep.labels[q] == p);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Episodic training with Adam and early stopping on validation accuracy.
pub fn train(prep: &Prepared, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = TggModel::new(prep.dataset.feature_dim(), cfg);
    let mut adam = AdamState::new(cfg.optimizer, &model.store);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut best = (validate(&model, prep)?, 0usize, model.clone());
    let mut stale = 0usize;
    let mut stopped_early = false;
    info!("episode 0: validation accuracy {:.4}", best.0);

    for e in 0..cfg.episodes {
        let seed = derive_seed(cfg.seed, TRAIN_STREAM, e as u64);
        let ep = build_episode(&prep.dataset, &prep.graph, &prep.synth, cfg, EpisodeKind::Train, seed)?;
        let store = model.store.clone();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let obj = model.objective(&b, &ep, &prep.graph, NormMode::Train)?;
        let parts = obj.parts();
        if !parts.total.is_finite() {
            return Err(TggError::Divergence { episode: e, seed });
        }
        obj.total.backward()?;
        let grads = b.grads();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TggError::Divergence { episode: e, seed });
        }
        let y = obj.y_star.value();
        let all: Vec<usize> = (0..ep.num_classes()).collect();
        let queries = ep.query_rows();
        let hits = queries
            .iter()
            .filter(|&&q| argmax_among(y.row(q), &all) == Some(ep.labels[q]))
            .count();
        let acc = hits as f64 / queries.len().max(1) as f64;
        adam.step(&mut model.store, &grads)?;
        if model.store.values().iter().any(|t| !t.is_finite()) {
            return Err(TggError::Divergence { episode: e, seed });
        }

        let done = e + 1;
        let val_acc = if done % cfg.val_interval == 0 || done == cfg.episodes {
            let v = validate(&model, prep)?;
            debug!("episode {done}: loss {:.4} validation accuracy {v:.4}", parts.total);
            if v > best.0 {
                best = (v, done, model.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            Some(v)
        } else {
            None
        };
        log.push(LogRow {
            episode: e,
            seed,
            loss_c: parts.loss_c,
            loss_d: parts.loss_d,
            loss_k: parts.loss_k,
            total: parts.total,
            acc,
            val_acc,
        });
        if val_acc.is_some() && stale >= cfg.patience {
            info!(
                "stopping after {done} episodes; best validation {:.4} at {}",
                best.0, best.1
            );
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        log,
        best_val_acc: best.0,
        best_episode: best.1,
        stopped_early,
    })
}

/// Test-time accuracies averaged over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: Mode,
    /// Top-1 on unseen queries (zsl, fsl) or the harmonic mean (gzsl).
    pub accuracy: f64,
    pub acc_seen: Option<f64>,
    pub acc_unseen: Option<f64>,
    pub hm: Option<f64>,
    /// Per-trial value of `accuracy`.
    pub trials: Vec<f64>,
}

fn run_trial(model: &TggModel, prep: &Prepared, mode: Mode, trial: usize) -> Result<(usize, usize, usize, usize)> {
    let cfg = &model.config;
    let mut m = model.clone();
    let (mut hs, mut ns, mut hu, mut nu) = (0, 0, 0, 0);
    for e in 0..cfg.eval_episodes {
        let seed = derive_seed(cfg.seed, EVAL_STREAM, (trial * cfg.eval_episodes + e) as u64);
        let ep = build_episode(
            &prep.dataset,
            &prep.graph,
            &prep.synth,
            cfg,
            EpisodeKind::Test(mode),
            seed,
        )?;
        let pred = m.predict(&ep, &prep.graph)?;
        for (q, p) in ep.query_rows().into_iter().zip(pred) {
            let hit = usize::from(ep.labels[q] == p);
            if ep.unseen_class[ep.labels[q]] {
                hu += hit;
                nu += 1;
            } else {
                hs += hit;
                ns += 1;
            }
        }
    }
    Ok((hs, ns, hu, nu))
}

/// Evaluates `model` in `mode`; trials run concurrently on model copies.
pub fn evaluate(model: &TggModel, prep: &Prepared, mode: Mode) -> Result<Metrics> {
    if mode == Mode::Fsl && prep.dataset.few_shot_k().is_none() {
        return Err(TggError::Config(
            "few-shot evaluation needs a dataset with unseen support".into(),
        ));
    }
    let trials = model.config.eval_trials;
    let counts: Vec<Result<(usize, usize, usize, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..trials)
            .map(|t| s.spawn(move || run_trial(model, prep, mode, t)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread"))
            .collect()
    });
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let mut seen = Vec::with_capacity(trials);
    let mut unseen = Vec::with_capacity(trials);
    for c in counts {
        let (hs, ns, hu, nu) = c?;
        seen.push(ratio(hs, ns));
        unseen.push(ratio(hu, nu));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(match mode {
        Mode::Gzsl => {
            let (s, u) = (mean(&seen), mean(&unseen));
            let hm = harmonic_mean(s, u);
            Metrics {
                mode,
                accuracy: hm,
                acc_seen: Some(s),
                acc_unseen: Some(u),
                hm: Some(hm),
                trials: seen.iter().zip(&unseen).map(|(&a, &b)| harmonic_mean(a, b)).collect(),
            }
        }
        _ => Metrics {
            mode,
            accuracy: mean(&unseen),
            acc_seen: None,
            acc_unseen: Some(mean(&unseen)),
            hm: None,
            trials: unseen,
        },
    })
}

/// Top-1 of assigning each unseen test instance to the nearest synthesized
/// unseen-class mean.
pub fn prototype_baseline(prep: &Prepared) -> Result<f64> {
    let ds = &prep.dataset;
    let means: Vec<(usize, Vec<f64>)> = ds
        .unseen_classes()
        .iter()
        .map(|&c| Ok((c, prep.synth.class_mean(c)?)))
        .collect::<Result<_>>()?;
    let test = &ds.splits().test_unseen;
    if test.is_empty() || means.is_empty() {
        warn!("no unseen test instances for the baseline");
        return Ok(0.0);
    }
    let dist = |x: &[f64], m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let hits = test
        .iter()
        .filter(|&&r| {
            let x = ds.feature(r);
            let best = means
                .iter()
                .min_by(|a, b| dist(x, &a.1).total_cmp(&dist(x, &b.1)))
                .expect("non-empty");
            best.0 == ds.labels()[r]
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Trains and evaluates once per crop threshold; rows sorted by threshold.
pub fn sensitivity_sweep(prep: &Prepared, cfg: &ExperimentConfig, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let mut ts = thresholds.to_vec();
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(TggError::Config(format!("threshold {t} is outside [0, 1]")));
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let cfg = ExperimentConfig {
                crop_threshold: t,
                ..cfg.clone()
            };
            let p = prep.with_threshold(t);
            let out = train(&p, &cfg)?;
            let m = evaluate(&out.model, &p, cfg.mode)?;
            info!("threshold {t}: accuracy {:.4}", m.accuracy);
            Ok(SweepRow {
                threshold: t,
                accuracy: m.accuracy,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SyntheticSpec;
    use crate::trainer::config::Ablation;

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig {
            agg_dims: vec![16, 8],
            gcn_dims: vec![8],
            edge_hidden: 8,
            sample_sizes: vec![4, 3],
            episodes: 12,
            val_interval: 4,
            val_episodes: 2,
            eval_trials: 2,
            eval_episodes: 1,
            eval_queries: 20,
            data: DataSource::Synthetic(SyntheticSpec {
                instances_per_class: 20,
                ..SyntheticSpec::default()
            }),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(0.896, 0.583) - 0.706).abs() <= 5e-4);
        assert!((harmonic_mean(0.4, 0.4) - 0.4).abs() <= 1e-15);
        assert_eq!(harmonic_mean(0.9, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick_cfg();
        let prep = Prepared::from_config(&cfg).unwrap();
        let a = train(&prep, &cfg).unwrap();
        let b = train(&prep, &cfg).unwrap();
        assert_eq!(a.log.len(), cfg.episodes);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert!(a.log.iter().filter(|r| r.val_acc.is_some()).count() == 3);
    }

    #[test]
    fn no_dual_logs_zero_dual_loss() {
        let cfg = ExperimentConfig {
            ablation: Ablation {
                no_dual: true,
                ..Ablation::default()
            },
            ..quick_cfg()
        };
        let prep = Prepared::from_config(&cfg).unwrap();
        let out = train(&prep, &cfg).unwrap();
        assert!(out.log.iter().all(|r| r.loss_d == 0.0));
        assert!(out.log.iter().all(|r| r.loss_k > 0.0));
    }

    #[test]
    fn early_stopping_with_zero_patience() {
        let cfg = ExperimentConfig {
            patience: 0,
            ..quick_cfg()
        };
        let prep = Prepared::from_config(&cfg).unwrap();
        let out = train(&prep, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), cfg.val_interval);
    }

    #[test]
    fn divergence_is_reported_with_seed() {
        let mut cfg = quick_cfg();
        cfg.optimizer.learning_rate = f64::INFINITY;
        let prep = Prepared::from_config(&cfg).unwrap();
        match train(&prep, &cfg) {
            Err(TggError::Divergence { episode, seed }) => {
                assert_eq!(episode, 0);
                assert_eq!(seed, derive_seed(cfg.seed, TRAIN_STREAM, episode as u64));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_ignores_query_labels() {
        let cfg = quick_cfg();
        let prep = Prepared::from_config(&cfg).unwrap();
        let mut model = TggModel::new(prep.dataset.feature_dim(), &cfg);
        let ep = build_episode(
            &prep.dataset,
            &prep.graph,
            &prep.synth,
            &cfg,
            EpisodeKind::Test(Mode::Gzsl),
            9,
        )
        .unwrap();
        let base = model.predict(&ep, &prep.graph).unwrap();
        let mut scrambled = ep.clone();
        let c = ep.num_classes();
        for q in ep.query_rows() {
            scrambled.labels[q] = (ep.labels[q] + 1) % c;
        }
        assert_eq!(model.predict(&scrambled, &prep.graph).unwrap(), base);
    }

    #[test]
    fn evaluation_ignores_unused_training_rows() {
        let cfg = quick_cfg();
        let prep = Prepared::from_config(&cfg).unwrap();
        let model = TggModel::new(prep.dataset.feature_dim(), &cfg);
        let before = evaluate(&model, &prep, Mode::Zsl).unwrap();
        // a seen train row never drawn as support in any evaluation episode
        let mut used = std::collections::HashSet::new();
        for t in 0..cfg.eval_trials * cfg.eval_episodes {
            let seed = derive_seed(cfg.seed, EVAL_STREAM, t as u64);
            let ep = build_episode(
                &prep.dataset,
                &prep.graph,
                &prep.synth,
                &cfg,
                EpisodeKind::Test(Mode::Zsl),
                seed,
            )
            .unwrap();
            used.extend(ep.sources.iter().flatten().copied());
        }
        let row = *prep.dataset.splits().train.iter().find(|r| !used.contains(r)).unwrap();
        let junk = vec![1e3; prep.dataset.feature_dim()];
        let perturbed = Prepared {
            dataset: prep.dataset.with_feature_row(row, &junk),
            ..prep.clone()
        };
        assert_eq!(evaluate(&model, &perturbed, Mode::Zsl).unwrap(), before);
    }

    #[test]
    fn gzsl_metrics_are_consistent() {
        let cfg = quick_cfg();
        let prep = Prepared::from_config(&cfg).unwrap();
        let model = TggModel::new(prep.dataset.feature_dim(), &cfg);
        let m = evaluate(&model, &prep, Mode::Gzsl).unwrap();
        let (s, u) = (m.acc_seen.unwrap(), m.acc_unseen.unwrap());
        assert_eq!(m.hm, Some(harmonic_mean(s, u)));
        assert!(m.accuracy <= (s + u) / 2.0 + 1e-15);
        assert_eq!(m.trials.len(), cfg.eval_trials);
        assert!(matches!(evaluate(&model, &prep, Mode::Fsl), Err(TggError::Config(_))));
    }

    #[test]
    fn sweep_rows_sorted_and_single_threshold_matches_plain_run() {
        let cfg = ExperimentConfig {
            episodes: 4,
            ..quick_cfg()
        };
        let prep = Prepared::from_config(&cfg).unwrap();
        let rows = sensitivity_sweep(&prep, &cfg, &[0.0]).unwrap();
        let plain = evaluate(&train(&prep, &cfg).unwrap().model, &prep, cfg.mode).unwrap();
        assert_eq!(
            rows,
            vec![SweepRow {
                threshold: 0.0,
                accuracy: plain.accuracy
            }]
        );
        let rows = sensitivity_sweep(&prep, &cfg, &[0.9, 0.1, 0.5]).unwrap();
        let ts: Vec<f64> = rows.iter().map(|r| r.threshold).collect();
        assert_eq!(ts, vec![0.1, 0.5, 0.9]);
        assert!(sensitivity_sweep(&prep, &cfg, &[1.5]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("threshold,accuracy"));
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let cfg = ExperimentConfig {
            episodes: 3,
            ..quick_cfg()
        };
        let prep = Prepared::from_config(&cfg).unwrap();
        let out = train(&prep, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&out.log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "episode,seed,loss_c,loss_d,loss_k,total,acc,val_acc"
        );
        assert_eq!(text.lines().count(), 4);
    }
}
