use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::SyntheticSpec;
use crate::error::{Result, TggError};
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Zsl,
    Gzsl,
    Fsl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Zsl => "zsl",
            Mode::Gzsl => "gzsl",
            Mode::Fsl => "fsl",
        })
    }
}

impl FromStr for Mode {
    type Err = TggError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(Mode::Zsl),
            "gzsl" => Ok(Mode::Gzsl),
            "fsl" => Ok(Mode::Fsl),
            other => Err(TggError::Config(format!("unknown mode {other}"))),
        }
    }
}

/// Components that can be switched off, one flag per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_aggregation: bool,
    pub no_attention: bool,
    pub no_gcn: bool,
    pub no_kernel: bool,
    pub no_dual: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["aggregation", "attention", "gcn", "kernel", "dual"];

    /// Ablation with the single named component disabled.
    pub fn without(name: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        match name {
            "aggregation" => a.no_aggregation = true,
            "attention" => a.no_attention = true,
            "gcn" => a.no_gcn = true,
            "kernel" => a.no_kernel = true,
            "dual" => a.no_dual = true,
            other => return Err(TggError::Config(format!("unknown component {other}"))),
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        features: PathBuf,
        attributes: PathBuf,
        splits: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    /// Normalized attribute inner products.
    Attributes,
    EdgeList(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataSource,
    pub graph: GraphSource,

    /// Classes per training episode.
    pub n_way: usize,
    /// Support instances per class.
    pub k_shot: usize,
    /// Query instances per training episode.
    pub queries: usize,
    /// Query instances per evaluation and validation episode.
    pub eval_queries: usize,
    /// Real support instances per unseen class in few-shot mode.
    pub fsl_shots: usize,
    /// Synthesized support instances per unseen class; `None` means `k_shot`.
    pub dummy_per_class: Option<usize>,

    pub lambda_dual: f64,
    pub lambda_kernel: f64,
    pub mu: f64,
    pub bandwidth: f64,
    pub logit_scale: f64,
    pub leaky_slope: f64,
    pub wl_iterations: usize,

    pub agg_dims: Vec<usize>,
    pub gcn_dims: Vec<usize>,
    pub edge_hidden: usize,
    pub sample_sizes: Vec<usize>,
    pub k_nn: usize,
    pub include_self: bool,
    pub crop_threshold: f64,
    pub ridge: f64,

    pub episodes: usize,
    pub val_interval: usize,
    pub val_episodes: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub eval_trials: usize,
    pub eval_episodes: usize,

    pub optimizer: AdamConfig,
    pub ablation: Ablation,
    /// Initialization, episode and evaluation seed.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Zsl,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            graph: GraphSource::Attributes,
            n_way: 5,
            k_shot: 3,
            queries: 10,
            eval_queries: 50,
            fsl_shots: 1,
            dummy_per_class: None,
            lambda_dual: 0.5,
            lambda_kernel: 0.5,
            mu: 0.5,
            bandwidth: 1.0,
            logit_scale: 1.0,
            leaky_slope: 0.2,
            wl_iterations: 2,
            agg_dims: vec![64, 32],
            gcn_dims: vec![32, 16],
            edge_hidden: 32,
            sample_sizes: vec![10, 5],
            k_nn: 5,
            include_self: true,
            crop_threshold: 0.0,
            ridge: 1e-6,
            episodes: 500,
            val_interval: 10,
            val_episodes: 5,
            patience: 50,
            eval_trials: 10,
            eval_episodes: 4,
            optimizer: AdamConfig::default(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative data and graph paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let DataSource::Files {
            features,
            attributes,
            splits,
        } = &mut self.data
        {
            fix(features);
            fix(attributes);
            fix(splits);
        }
        if let GraphSource::EdgeList(p) = &mut self.graph {
            fix(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dummies(&self) -> usize {
        self.dummy_per_class.unwrap_or(self.k_shot)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TggError::Config(m.to_string()));
        if self.lambda_dual < 0.0 || self.lambda_kernel < 0.0 {
            return err("loss weights must be >= 0");
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return err("mu must lie in (0, 1)");
        }
        if self.bandwidth <= 0.0 || self.logit_scale <= 0.0 {
            return err("bandwidth and logit_scale must be > 0");
        }
        if self.n_way < 2 || self.k_shot == 0 || self.queries == 0 || self.eval_queries == 0 {
            return err("need n_way >= 2 and positive k_shot, queries, eval_queries");
        }
        if self.mode == Mode::Fsl && !matches!(self.fsl_shots, 1 | 3) {
            return err("few-shot mode supports 1 or 3 real shots per unseen class");
        }
        if self.fsl_shots > self.k_shot && self.mode == Mode::Fsl {
            return err("fsl_shots cannot exceed k_shot");
        }
        if self.dummy_per_class == Some(0) {
            return err("dummy_per_class must be positive");
        }
        if self.agg_dims.len() != self.sample_sizes.len() {
            return err("agg_dims and sample_sizes need one entry per hop");
        }
        if self.agg_dims.contains(&0) || self.gcn_dims.contains(&0) || self.edge_hidden == 0 {
            return err("layer widths must be positive");
        }
        if self.sample_sizes.contains(&0) || self.wl_iterations == 0 {
            return err("sample sizes and wl_iterations must be positive");
        }
        if !(0.0..=1.0).contains(&self.crop_threshold) {
            return err("crop_threshold must lie in [0, 1]");
        }
        if self.val_interval == 0 || self.eval_trials == 0 || self.eval_episodes == 0 {
            return err("val_interval, eval_trials and eval_episodes must be positive");
        }
        Ok(())
    }
}
