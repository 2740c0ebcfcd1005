//! Synthetic inputs shared by the benchmarks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `[batch, steps, width]` tensor of uniform values in [-1, 1).
pub fn sequences(batch: usize, steps: usize, width: usize, seed: u64) -> Array3<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((batch, steps, width), |_| r.random_range(-1.0..1.0))
}

/// Rows with a noisy logistic dependence on the first three columns.
pub fn tabular(n: usize, width: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, width), |_| r.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|i| {
            let z: f64 = x[[i, 0]] - 0.5 * x[[i, 1]] + x[[i, 2]] * x[[i, 0]];
            f64::from(r.random_bool(1.0 / (1.0 + (-z).exp())))
        })
        .collect();
    (x, y)
}

/// Scores and labels for a ranking metric, positives at `rate`.
pub fn scored(n: usize, rate: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(rate))).collect();
    let scores = labels.iter().map(|y| y * 0.3 + r.random::<f64>()).collect();
    (scores, labels)
}
