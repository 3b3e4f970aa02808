//! Fixtures shared by the benchmarks.

use kronfisher::{Activation, LayerStats, LossKind, Matrix, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform samples for one layer with `d_in` inputs and `d_out` units.
pub fn layer_stats(m: usize, d_in: usize, d_out: usize, seed: u64) -> LayerStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let abar = Matrix::from_fn(m, d_in + 1, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let g = Matrix::from_fn(m, d_out, |_, _| rng.random_range(-1.0..1.0));
    LayerStats::new(abar, g).expect("matching rows")
}

/// The desk autoencoder and one batch of inputs in `[0, 1]`.
pub fn desk_model(batch: usize, seed: u64) -> (Mlp, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acts = vec![Activation::Relu; 5];
    acts.push(Activation::Sigmoid);
    let model = Mlp::init(vec![64, 32, 16, 6, 16, 32, 64], acts, LossKind::BinaryCrossEntropy, &mut rng)
        .expect("valid architecture");
    let x = Matrix::from_fn(batch, 64, |_, _| rng.random::<f64>());
    (model, x)
}

/// A symmetric positive definite `n x n` matrix.
pub fn spd(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &x * x.transpose() + Matrix::identity(n, n) * n as f64
}
