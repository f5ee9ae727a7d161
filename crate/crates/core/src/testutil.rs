//! Test-only helpers: random tensors and a central finite-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let vals = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, vals)
}

/// `‖analytic − numeric‖₂ / max(‖numeric‖₂, 1e-8)`, worst over all inputs.
///
/// `f` must be a pure function of the bound inputs; it is re-run on fresh
/// tapes for every perturbation.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    loss.backward().expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| t.map(|_| 0.0)))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].values_mut()[i] = input.values()[i] + FD_STEP;
            let up = eval(&xs);
            xs[k].values_mut()[i] = input.values()[i] - FD_STEP;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic[k]
            .values()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / norm);
    }
    worst
}

/// Contracts an arbitrary output with fixed random weights so every entry matters.
pub fn probe<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let v = out.value();
    let w = random_tensor(&mut rng(seed), v.rows(), v.cols());
    out.mul(&out.tape().constant(w)).map(|p| p.sum())
}
