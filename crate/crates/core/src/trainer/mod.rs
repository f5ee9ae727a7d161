//! Episodic training, evaluation and threshold sweeps.

mod config;
mod episode;
mod model;
mod run;

pub use config::{Ablation, DataSource, ExperimentConfig, GraphSource, Mode};
pub use episode::{build_episode, derive_seed, Episode, EpisodeKind};
pub use model::{cross_entropy, LossParts, Objective, TggModel};
pub use run::{
    evaluate, harmonic_mean, prototype_baseline, sensitivity_sweep, train, validate, write_log_csv, write_sweep_csv,
    LogRow, Metrics, Prepared, SweepRow, TrainOutcome,
};
