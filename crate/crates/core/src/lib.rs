//! Transferable graph generation for zero-shot, generalized zero-shot and
//! few-shot classification.
//!
//! The pipeline builds an episode-level instance graph from real and
//! synthesized visual features, revises node embeddings with attention-based
//! neighborhood aggregation guided by a class-level prototype graph, learns
//! explicit edges with a relation kernel, and classifies by closed-form label
//! propagation over the generated graph.

pub mod aggnet;
pub mod dataio;
pub mod error;
pub mod propagate;
pub mod protograph;
pub mod relkernel;
pub mod synth;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use aggnet::{AggNet, AggOptions, EpisodeNeighborhood};
pub use dataio::{generate_synthetic, Dataset, Domain, Splits, SyntheticSpec};
pub use error::{Result, TggError};
pub use propagate::LabelMatrix;
pub use protograph::PrototypeGraph;
pub use relkernel::RelKernel;
pub use synth::ConditionalSynthesizer;
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{
    evaluate, harmonic_mean, prototype_baseline, sensitivity_sweep, train, Ablation, ExperimentConfig, Metrics, Mode,
    Prepared, TggModel,
};
