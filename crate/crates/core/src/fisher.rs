//! Per-layer mini-batch statistics and the Fisher block they implicitly define.
//!
//! For layer `i` the Fisher block is `F = E[ā ā^T ⊗ g g^T]`, estimated by the
//! batch average over per-sample augmented activations `ā_t` and preactivation
//! derivatives `g_t`. The rearranged products `Z(F) v` and `Z(F)^T u` are
//! evaluated from the samples in `O(m d^2)` without forming `F`.

use crate::error::{Error, Result};
use crate::linalg::{mat, vec, Matrix, Vector};

/// Largest Fisher block dimension [`exact_fim_block`] will materialise.
pub const MAX_DENSE_FIM_DIM: usize = 2500;

/// Samples for one layer: `abar` is `m x (d_{i-1}+1)` with a leading column of
/// ones, `g` is `m x d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    abar: Matrix,
    g: Matrix,
}

impl LayerStats {
    pub fn new(abar: Matrix, g: Matrix) -> Result<Self> {
        if abar.nrows() != g.nrows() {
            return Err(Error::dims("LayerStats rows", abar.nrows(), g.nrows()));
        }
        if abar.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { abar, g })
    }

    pub fn abar(&self) -> &Matrix {
        &self.abar
    }

    pub fn g(&self) -> &Matrix {
        &self.g
    }

    pub fn batch_size(&self) -> usize {
        self.abar.nrows()
    }

    /// `d = d_{i-1} + 1`, the side of the activation factor.
    pub fn activation_dim(&self) -> usize {
        self.abar.ncols()
    }

    /// `d' = d_i`, the side of the derivative factor.
    pub fn derivative_dim(&self) -> usize {
        self.g.ncols()
    }

    /// Dimension of the Fisher block, `d * d'`.
    pub fn block_dim(&self) -> usize {
        self.activation_dim() * self.derivative_dim()
    }
}

/// Statistics for every layer of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBatchStats {
    layers: Vec<LayerStats>,
}

impl LayerBatchStats {
    pub fn new(layers: Vec<LayerStats>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::EmptyBatch);
        };
        let m = first.batch_size();
        if let Some(bad) = layers.iter().find(|l| l.batch_size() != m) {
            return Err(Error::dims(
                "LayerBatchStats batch size",
                m,
                bad.batch_size(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerStats] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Result<&LayerStats> {
        self.layers
            .get(i)
            .ok_or_else(|| Error::dims("layer index", format!("< {}", self.layers.len()), i))
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].batch_size()
    }
}

/// Dense `F = (1/m) Σ_t vec(g_t ā_t^T) vec(g_t ā_t^T)^T`.
pub fn exact_fim_block(stats: &LayerStats) -> Result<Matrix> {
    let dim = stats.block_dim();
    if dim > MAX_DENSE_FIM_DIM {
        return Err(Error::SizeGuard {
            dim,
            limit: MAX_DENSE_FIM_DIM,
        });
    }
    let jac = per_sample_gradients(stats);
    let m = stats.batch_size() as f64;
    Ok(jac.transpose() * &jac / m)
}

/// Rows are `vec(g_t ā_t^T)^T = (ā_t ⊗ g_t)^T`.
pub(crate) fn per_sample_gradients(stats: &LayerStats) -> Matrix {
    let (d, dp) = (stats.activation_dim(), stats.derivative_dim());
    let mut jac = Matrix::zeros(stats.batch_size(), d * dp);
    for t in 0..stats.batch_size() {
        for a in 0..d {
            let at = stats.abar[(t, a)];
            for b in 0..dp {
                jac[(t, a * dp + b)] = at * stats.g[(t, b)];
            }
        }
    }
    jac
}

/// Row sums of `(X M) ⊙ X`, i.e. `x_t^T M x_t` for every sample row.
fn quadratic_forms(x: &Matrix, m: &Matrix) -> Vector {
    let xm = x * m;
    Vector::from_iterator(
        x.nrows(),
        xm.row_iter().zip(x.row_iter()).map(|(a, b)| a.dot(&b)),
    )
}

/// `vec((1/m) Σ_t c_t x_t x_t^T)`.
fn weighted_gram(x: &Matrix, weights: &Vector) -> Vector {
    let mut scaled = x.clone();
    for (mut row, w) in scaled.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    vec(&(x.transpose() * scaled / x.nrows() as f64))
}

/// `Z(F) v = (1/m) Σ_t (g_t^T V g_t) vec(ā_t ā_t^T)` with `V = mat(v)`.
pub fn zf_matvec(stats: &LayerStats, v: &Vector) -> Result<Vector> {
    let dp = stats.derivative_dim();
    if v.len() != dp * dp {
        return Err(Error::dims("zf_matvec", dp * dp, v.len()));
    }
    let vm = mat(v, dp, dp)?;
    let coeffs = quadratic_forms(&stats.g, &vm);
    Ok(weighted_gram(&stats.abar, &coeffs))
}

/// `Z(F)^T u = (1/m) Σ_t (ā_t^T U ā_t) vec(g_t g_t^T)` with `U = mat(u)`.
pub fn zf_rmatvec(stats: &LayerStats, u: &Vector) -> Result<Vector> {
    let d = stats.activation_dim();
    if u.len() != d * d {
        return Err(Error::dims("zf_rmatvec", d * d, u.len()));
    }
    let um = mat(u, d, d)?;
    let coeffs = quadratic_forms(&stats.abar, &um);
    Ok(weighted_gram(&stats.g, &coeffs))
}


#[cfg(test)]
mod tests {
    use super::test_support::random_stats;
    use super::*;
    use crate::linalg::{kron, spectrum, zigzag};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_oracle(stats: &LayerStats) -> Matrix {
        let (d, dp) = (stats.activation_dim(), stats.derivative_dim());
        let mut f = Matrix::zeros(d * dp, d * dp);
        for t in 0..stats.batch_size() {
            let a = stats.abar().row(t).transpose();
            let g = stats.g().row(t).transpose();
            f += kron(&(&a * a.transpose()), &(&g * g.transpose()));
        }
        f / stats.batch_size() as f64
    }

    #[test]
    fn single_sample_block_is_a_kronecker_product() {
        let stats = random_stats(1, 3, 2, 1);
        let f = exact_fim_block(&stats).unwrap();
        let a = stats.abar().row(0).transpose();
        let g = stats.g().row(0).transpose();
        let expected = kron(&(&a * a.transpose()), &(&g * g.transpose()));
        assert!((&f - expected).norm() <= 1e-14);
        let sv = crate::linalg::svd_dense(&f).unwrap().sigma;
        assert!(sv[1] <= 1e-12 * sv[0]);
    }

    #[test]
    fn exact_block_matches_dense_kronecker_sum_and_is_psd() {
        let stats = random_stats(20, 4, 3, 2);
        let f = exact_fim_block(&stats).unwrap();
        assert!((&f - dense_oracle(&stats)).norm() <= 1e-12);
        let eig = spectrum(&f).unwrap();
        assert!(eig[eig.len() - 1] >= -1e-10 * eig[0]);
    }

    #[test]
    fn exact_block_is_gram_of_per_sample_gradients() {
        let stats = random_stats(9, 2, 3, 3);
        let f = exact_fim_block(&stats).unwrap();
        let mut gram = Matrix::zeros(f.nrows(), f.ncols());
        for t in 0..9 {
            let g = stats.g().row(t).transpose();
            let a = stats.abar().row(t).transpose();
            let dw = vec(&(&g * a.transpose()));
            gram += &dw * dw.transpose();
        }
        assert!((f - gram / 9.0).norm() <= 1e-12);
    }

    #[test]
    fn size_guard() {
        let stats = random_stats(2, 60, 60, 4);
        assert!(matches!(
            exact_fim_block(&stats),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn matvec_matches_dense_zigzag() {
        let stats = random_stats(15, 3, 4, 5);
        let z = zigzag(&exact_fim_block(&stats).unwrap(), 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Vector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
        let u = Vector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
        assert!((zf_matvec(&stats, &v).unwrap() - &z * &v).norm() <= 1e-10);
        assert!((zf_rmatvec(&stats, &u).unwrap() - z.transpose() * &u).norm() <= 1e-10);
    }

    #[test]
    fn matvec_of_identity_is_trace_weighted_gram() {
        let stats = random_stats(7, 2, 3, 7);
        let got = zf_matvec(&stats, &vec(&Matrix::identity(3, 3))).unwrap();
        let mut expected = Matrix::zeros(3, 3);
        for t in 0..7 {
            let a = stats.abar().row(t).transpose();
            expected += stats.g().row(t).norm_squared() * &a * a.transpose();
        }
        assert!((got - vec(&(expected / 7.0))).norm() <= 1e-12);
    }

    #[test]
    fn matvec_rejects_bad_lengths() {
        let stats = random_stats(3, 2, 2, 8);
        assert!(zf_matvec(&stats, &Vector::zeros(5)).is_err());
        assert!(zf_rmatvec(&stats, &Vector::zeros(4)).is_err());
    }

    proptest! {
        #[test]
        fn matvec_pair_is_adjoint_and_linear(seed in any::<u64>(), alpha in -2.0f64..2.0) {
            let stats = random_stats(6, 3, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let v1 = Vector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let v2 = Vector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let u = Vector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
            let zv = zf_matvec(&stats, &v1).unwrap();
            let ztu = zf_rmatvec(&stats, &u).unwrap();
            prop_assert!((zv.dot(&u) - v1.dot(&ztu)).abs() <= 1e-10 * (1.0 + zv.norm() * u.norm()));
            let lin = zf_matvec(&stats, &(alpha * &v1 + &v2)).unwrap();
            let sum = alpha * zv + zf_matvec(&stats, &v2).unwrap();
            prop_assert!((lin - sum).norm() <= 1e-10 * (1.0 + lin_norm(&stats)));
        }
    }

    fn lin_norm(stats: &LayerStats) -> f64 {
        stats.abar().norm() * stats.g().norm()
    }
}
