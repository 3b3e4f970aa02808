use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{exact_sqrt, Vector};

use super::operator::RearrangedOp;

/// `A v = sigma u`, `A^T u = sigma v` with unit `u`, `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vector,
    pub v: Vector,
}

impl SingularTriplet {
    /// `‖A v − σ u‖₂`.
    pub fn residual(&self, op: &dyn RearrangedOp) -> f64 {
        (op.matvec(&self.v) - self.sigma * &self.u).norm()
    }

    /// `‖A^T u − σ v‖₂`.
    pub fn adjoint_residual(&self, op: &dyn RearrangedOp) -> f64 {
        (op.rmatvec(&self.u) - self.sigma * &self.v).norm()
    }

    /// Flips `(u, v)` jointly so that `trace(mat(u)) >= 0`. Vectors that are
    /// not vectorised square matrices, or whose trace vanishes, fall back to
    /// making the largest-magnitude entry of `u` positive.
    pub fn normalize_sign(&mut self) {
        if sign_of(&self.u) < 0.0 {
            self.u.neg_mut();
            self.v.neg_mut();
        }
    }
}

pub(crate) fn sign_of(u: &Vector) -> f64 {
    if let Some(n) = exact_sqrt(u.len()) {
        let trace: f64 = (0..n).map(|i| u[i * n + i]).sum();
        if trace.abs() > 1e-12 * u.norm() {
            return trace.signum();
        }
    }
    let idx = u.iamax();
    if u.is_empty() || u[idx] >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSvd {
    pub triplet: SingularTriplet,
    pub iterations: usize,
    pub converged: bool,
    /// The operator annihilated the iterate; `sigma` is 0.
    pub zero_operator: bool,
}

/// Seeded random unit vector, used when no warm start is available.
pub fn random_unit(n: usize, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let v = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let norm = v.norm();
    v / norm
}

const DEFAULT_SEED: u64 = 0x5eed_cafe;

/// Dominant singular triplet by alternating power iteration.
///
/// Each sweep computes `w = A v`, `u = w/‖w‖`, `z = A^T u`, `v = z/‖z‖`,
/// `σ = ‖z‖` and stops once `‖A v − σ u‖ ≤ eps · σ`. The product `A v` of the
/// stopping test is reused by the next sweep. When `k_max` sweeps pass without
/// convergence the last iterate is returned with `converged = false`.
pub fn power_svd(
    op: &dyn RearrangedOp,
    eps: f64,
    k_max: usize,
    v0: Option<&Vector>,
) -> Result<PowerSvd> {
    let n = op.ncols();
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "power SVD precision must be positive, got {eps}"
        )));
    }
    if n == 0 || op.nrows() == 0 {
        return Err(Error::dims(
            "power_svd operator",
            "non-empty",
            format!("{}x{}", op.nrows(), n),
        ));
    }

    let mut v = match v0 {
        Some(v0) if v0.len() == n && v0.norm() > 0.0 && v0.iter().all(|x| x.is_finite()) => {
            v0 / v0.norm()
        }
        Some(v0) if v0.len() != n => return Err(Error::dims("power_svd warm start", n, v0.len())),
        _ => random_unit(n, DEFAULT_SEED),
    };
    let zero = |v: Vector, iterations| PowerSvd {
        triplet: SingularTriplet {
            sigma: 0.0,
            u: Vector::zeros(op.nrows()),
            v,
        },
        iterations,
        converged: false,
        zero_operator: true,
    };

    let mut w = op.matvec(&v);
    let mut u = Vector::zeros(op.nrows());
    let mut sigma = 0.0;
    for k in 1..=k_max.max(1) {
        let wn = w.norm();
        if !wn.is_finite() {
            return Err(Error::NonFinite("power SVD iterate".into()));
        }
        if wn == 0.0 {
            return Ok(zero(v, k));
        }
        u = &w / wn;
        let z = op.rmatvec(&u);
        sigma = z.norm();
        if !sigma.is_finite() {
            return Err(Error::NonFinite("power SVD iterate".into()));
        }
        if sigma == 0.0 {
            return Ok(zero(v, k));
        }
        v = z / sigma;
        w = op.matvec(&v);
        let error = (&w - sigma * &u).norm();
        if error <= eps * sigma {
            let mut triplet = SingularTriplet { sigma, u, v };
            triplet.normalize_sign();
            return Ok(PowerSvd {
                triplet,
                iterations: k,
                converged: true,
                zero_operator: false,
            });
        }
    }
    log::warn!("power SVD did not reach precision {eps} in {k_max} iterations; using last iterate");
    let mut triplet = SingularTriplet { sigma, u, v };
    triplet.normalize_sign();
    Ok(PowerSvd {
        triplet,
        iterations: k_max.max(1),
        converged: false,
        zero_operator: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron_approx::operator::DenseOp;
    use crate::linalg::{kron, vec, zigzag, Matrix};
    use rand::{Rng, SeedableRng};

    #[test]
    fn diagonal_operator() {
        let op = DenseOp(Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0])));
        let r = power_svd(&op, 1e-10, 500, None).unwrap();
        assert!(r.converged);
        assert!((r.triplet.sigma - 3.0).abs() < 1e-9);
        assert!((r.triplet.u[0].abs() - 1.0).abs() < 1e-9);
        assert!((r.triplet.v[0].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exact_kronecker_product_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = Matrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let z = zigzag(&kron(&r, &s), 3, 2).unwrap();
        let op = DenseOp(z.clone());
        let out = power_svd(&op, 1e-6, 500, None).unwrap();
        assert!((out.triplet.sigma - r.norm() * s.norm()).abs() <= 1e-10 * r.norm() * s.norm());
        let rest = z - out.triplet.sigma * &out.triplet.u * out.triplet.v.transpose();
        assert!(rest.norm() <= 1e-8);
        let expected_u = vec(&r) / r.norm();
        assert!((out.triplet.u.dot(&expected_u).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_operator_is_flagged() {
        let op = DenseOp(Matrix::zeros(3, 2));
        let out = power_svd(&op, 1e-6, 10, None).unwrap();
        assert!(out.zero_operator);
        assert_eq!(out.triplet.sigma, 0.0);
        assert!(!out.converged);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(
            power_svd(&DenseOp(m), 1e-6, 10, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn unconverged_returns_last_iterate() {
        // Equal singular values never separate under a loose iteration cap.
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.999_999, 0.5]));
        let out = power_svd(
            &DenseOp(m),
            1e-14,
            3,
            Some(&Vector::from_vec(vec![1.0, 1.0, 1.0])),
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
        assert!((out.triplet.u.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warm_start_dimension_is_checked() {
        let op = DenseOp(Matrix::identity(3, 3));
        assert!(power_svd(&op, 1e-6, 10, Some(&Vector::zeros(2))).is_err());
    }

    #[test]
    fn sign_convention_makes_trace_nonnegative() {
        let mut t = SingularTriplet {
            sigma: 1.0,
            u: -vec(&Matrix::identity(2, 2)) / 2f64.sqrt(),
            v: Vector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
        };
        t.normalize_sign();
        assert!(t.u[0] > 0.0 && t.v[0] < 0.0);
    }
}
