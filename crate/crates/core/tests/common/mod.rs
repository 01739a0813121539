#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subshift_core::{Batch, Matrix, Model};

/// Random features in [-2, 2), random binary labels, four groups, positive
/// sample weights.
pub fn random_batch(dim: usize, n: usize, seed: u64) -> (Batch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
    let groups = (0..n).map(|_| rng.random_range(0..4)).collect();
    let weights = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), labels, groups, (0..n).collect()).unwrap();
    (batch, weights)
}

fn weighted_loss(model: &Model, batch: &Batch, weights: &[f64]) -> f64 {
    model
        .loss_per_sample(batch)
        .unwrap()
        .iter()
        .zip(weights)
        .map(|(l, w)| l * w)
        .sum()
}

/// Largest, over parameter tensors, of `max|analytic - fd| / max(|analytic|,
/// |fd|)` with the maxima taken over the tensor's entries.
pub fn fd_max_relative_error(model: &Model, batch: &Batch, weights: &[f64], eps: f64) -> f64 {
    let analytic = model.grad(batch, weights).unwrap();
    let shapes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for (t, &len) in shapes.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..len {
            let mut plus = model.clone();
            plus.params_mut().tensors_mut()[t][j] += eps;
            let mut minus = model.clone();
            minus.params_mut().tensors_mut()[t][j] -= eps;
            let fd = (weighted_loss(&plus, batch, weights) - weighted_loss(&minus, batch, weights)) / (2.0 * eps);
            let a = analytic.tensors()[t][j];
            max_diff = max_diff.max((a - fd).abs());
            scale = scale.max(a.abs()).max(fd.abs());
        }
        worst = worst.max(max_diff / scale.max(1e-300));
    }
    worst
}
