//! Attribute-conditioned Gaussian feature synthesizer for dummy unseen-class
//! support.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Result, TggError};
use crate::tensor::{Lu, Tensor};

/// Default ridge coefficient.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Frobenius norm of fitted minus empirical seen-class means.
    pub residual: f64,
    pub ridge: f64,
    pub classes_used: usize,
    /// Fewer fitted classes than needed to pin down the attribute map.
    pub underdetermined: bool,
}

/// Affine map `x = M·e + b` plus diagonal Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSynthesizer {
    /// `[d x m]`.
    pub mixing: Tensor,
    /// `[1 x d]`.
    pub bias: Tensor,
    /// Per-dimension noise standard deviation.
    pub noise: Vec<f64>,
    /// Attribute rows of every class the synthesizer can sample, `[C x m]`.
    pub attributes: Tensor,
    pub report: FitReport,
}

impl ConditionalSynthesizer {
    /// Fits on per-class means of seen-class train instances.
    pub fn fit(ds: &Dataset, ridge: f64) -> Result<Self> {
        let (d, m) = (ds.feature_dim(), ds.attribute_dim());
        let train = &ds.splits().train;
        let mut means = Vec::new();
        let mut attrs = Vec::new();
        let mut sq = vec![0.0; d];
        let mut dof = 0usize;
        for &c in ds.seen_classes() {
            let rows = ds.instances_of(train, c);
            if rows.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &r in &rows {
                mean.iter_mut().zip(ds.feature(r)).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= rows.len() as f64);
            for &r in &rows {
                for (j, v) in ds.feature(r).iter().enumerate() {
                    sq[j] += (v - mean[j]).powi(2);
                }
            }
            dof += rows.len() - 1;
            means.push(mean);
            attrs.push(ds.attributes().row(c).to_vec());
        }
        if means.is_empty() {
            return Err(TggError::Invariant("no seen-class train instances to fit on".into()));
        }
        let noise = sq
            .iter()
            .map(|s| if dof > 0 { (s / dof as f64).sqrt() } else { 0.0 })
            .collect();
        let means = Tensor::from_rows(&means)?;
        let attrs = Tensor::from_rows(&attrs)?;
        let mut synth = Self::fit_means(&attrs, &means, ridge)?;
        synth.noise = noise;
        synth.attributes = ds.attributes().clone();
        debug_assert_eq!(synth.mixing.shape(), [d, m]);
        Ok(synth)
    }

    /// Ridge regression of `means [S x d]` on `attrs [S x m]` with an
    /// unpenalized intercept. Noise is zero and the class table is `attrs`.
    pub fn fit_means(attrs: &Tensor, means: &Tensor, ridge: f64) -> Result<Self> {
        let (s, m) = (attrs.rows(), attrs.cols());
        let d = means.cols();
        if means.rows() != s {
            return Err(TggError::Dimension {
                op: "synth_fit",
                left: attrs.shape().to_vec(),
                right: means.shape().to_vec(),
            });
        }
        if ridge < 0.0 {
            return Err(TggError::Config("ridge must be >= 0".into()));
        }
        let underdetermined = s < m + 1;
        let mut ridge = ridge;
        if underdetermined {
            log::warn!("{s} classes for {m} attributes: attribute map is underdetermined");
            if ridge == 0.0 {
                ridge = DEFAULT_RIDGE;
            }
        }
        let col_mean = |t: &Tensor| -> Vec<f64> {
            (0..t.cols())
                .map(|j| (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / t.rows() as f64)
                .collect()
        };
        let (ea, em) = (col_mean(attrs), col_mean(means));
        let mut ec = attrs.clone();
        let mut mc = means.clone();
        for i in 0..s {
            ec.row_mut(i).iter_mut().zip(&ea).for_each(|(v, a)| *v -= a);
            mc.row_mut(i).iter_mut().zip(&em).for_each(|(v, a)| *v -= a);
        }
        let ect = ec.transpose();
        let mut gram = ect.matmul(&ec)?;
        for k in 0..m {
            gram.set(k, k, gram.get(k, k) + ridge);
        }
        // W^T = (EᵀE + λI)⁻¹ Eᵀ M
        let wt = Lu::factor(&gram)?.solve(&ect.matmul(&mc)?)?;
        let mixing = wt.transpose();
        let mut bias = vec![0.0; d];
        for (j, b) in bias.iter_mut().enumerate() {
            *b = em[j] - (0..m).map(|k| mixing.get(j, k) * ea[k]).sum::<f64>();
        }
        let bias = Tensor::matrix(1, d, bias);
        let mut synth = ConditionalSynthesizer {
            mixing,
            bias,
            noise: vec![0.0; d],
            attributes: attrs.clone(),
            report: FitReport {
                residual: 0.0,
                ridge,
                classes_used: s,
                underdetermined,
            },
        };
        let mut sq = 0.0;
        for i in 0..s {
            let pred = synth.mean_for(attrs.row(i));
            sq += pred.iter().zip(means.row(i)).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        }
        synth.report.residual = sq.sqrt();
        Ok(synth)
    }

    pub fn feature_dim(&self) -> usize {
        self.mixing.rows()
    }

    /// `M·e + b`.
    pub fn mean_for(&self, attribute: &[f64]) -> Vec<f64> {
        (0..self.feature_dim())
            .map(|j| {
                self.mixing
                    .row(j)
                    .iter()
                    .zip(attribute)
                    .map(|(w, e)| w * e)
                    .sum::<f64>()
                    + self.bias.values()[j]
            })
            .collect()
    }

    pub fn class_mean(&self, class: usize) -> Result<Vec<f64>> {
        if class >= self.attributes.rows() {
            return Err(TggError::Schema(format!("class {class} has no attribute row")));
        }
        Ok(self.mean_for(self.attributes.row(class)))
    }

    pub fn sample(&self, class: usize, count: usize, seed: u64) -> Result<Tensor> {
        self.sample_with(class, count, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, class: usize, count: usize, rng: &mut R) -> Result<Tensor> {
        let mean = self.class_mean(class)?;
        let d = mean.len();
        let mut out = Vec::with_capacity(count * d);
        for _ in 0..count {
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out.push(mean[j] + self.noise[j] * z);
            }
        }
        Ok(Tensor::matrix(count, d, out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
