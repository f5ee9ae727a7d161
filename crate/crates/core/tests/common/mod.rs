//! Shared helpers for the integration targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgg_core::tensor::{Tape, Tensor, Var};
use tgg_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Worst relative error `‖g − ĝ‖₂ / max(‖ĝ‖₂, 1e-8)` between the tape
/// gradient and a central difference with step `1e-5`, over all inputs.
pub fn central_difference_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    const H: f64 = 1e-5;
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars).expect("forward").backward().expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.values().to_vec()))
        .collect();
    let value = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut xs = inputs.to_vec();
        let mut num = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let x0 = input.values()[i];
            xs[k].values_mut()[i] = x0 + H;
            let up = value(&xs);
            xs[k].values_mut()[i] = x0 - H;
            let down = value(&xs);
            xs[k].values_mut()[i] = x0;
            num.push((up - down) / (2.0 * H));
        }
        let diff = analytic[k]
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Scalar `Σ out ⊙ W` for a fixed random `W`.
pub fn contract<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let (r, c) = (out.value().rows(), out.value().cols());
    let w = uniform(&mut rng(seed), r, c, -1.0, 1.0);
    out.mul(&out.tape().constant(w)).map(|p| p.sum())
}

/// Runs `f` over `items` on up to `available_parallelism` threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}
