use crate::error::{Error, Result};
use crate::linalg::{svd_dense, Matrix, Vector};

use super::operator::RearrangedOp;
use super::power::{random_unit, SingularTriplet};

/// Output of a Golub–Kahan bidiagonalization run: `A Q = P H` with `H` upper
/// bidiagonal, and `A^T P = Q H^T + residual e_last^T`.
#[derive(Debug, Clone)]
pub struct LanczosBidiag {
    /// Left basis, `nrows x rank`.
    pub p: Matrix,
    /// Right basis, `ncols x rank`.
    pub q: Matrix,
    /// `rank x rank`, `H[k,k] = α_k`, `H[k,k+1] = β_k`.
    pub h: Matrix,
    /// Unnormalised component of `A^T p_last` outside the right basis.
    pub residual: Vector,
}

impl LanczosBidiag {
    pub fn rank(&self) -> usize {
        self.h.nrows()
    }
}

/// Subtracts the projection onto the first `cols` columns of `basis`, twice.
fn reorthogonalize(x: &mut Vector, basis: &Matrix, cols: usize) {
    for _ in 0..2 {
        for j in 0..cols {
            let c = basis.column(j);
            let coef = c.dot(x);
            x.axpy(-coef, &c, 1.0);
        }
    }
}

/// `K` steps of Lanczos bidiagonalization from the unit vector `q0`, with full
/// reorthogonalization of every new left and right vector.
///
/// Stops early when `β_k ≤ eps · max α` (an invariant subspace was found) or
/// when a new `α` vanishes; the returned basis then has fewer than `K` columns.
pub fn lanczos_bidiag(
    op: &dyn RearrangedOp,
    k_dim: usize,
    eps: f64,
    q0: &Vector,
) -> Result<LanczosBidiag> {
    let (nr, nc) = (op.nrows(), op.ncols());
    if q0.len() != nc {
        return Err(Error::dims("lanczos_bidiag start vector", nc, q0.len()));
    }
    if (q0.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!(
            "start vector must have unit norm, got {}",
            q0.norm()
        )));
    }
    if k_dim == 0 {
        return Err(Error::Config("Krylov dimension must be at least 1".into()));
    }
    let k_dim = k_dim.min(nr).min(nc);

    let mut p = Matrix::zeros(nr, k_dim);
    let mut q = Matrix::zeros(nc, k_dim);
    let mut alphas = Vec::with_capacity(k_dim);
    let mut betas = Vec::with_capacity(k_dim);

    let w = op.matvec(q0);
    let alpha0 = w.norm();
    if !alpha0.is_finite() {
        return Err(Error::NonFinite("Lanczos iterate".into()));
    }
    q.set_column(0, q0);
    if alpha0 == 0.0 {
        return Ok(LanczosBidiag {
            p: Matrix::zeros(nr, 0),
            q: Matrix::zeros(nc, 0),
            h: Matrix::zeros(0, 0),
            residual: op.rmatvec(&Vector::zeros(nr)),
        });
    }
    p.set_column(0, &(w / alpha0));
    alphas.push(alpha0);
    let mut scale = alpha0;

    let mut rank = 1;
    let residual;
    loop {
        let k = rank - 1;
        let mut z = op.rmatvec(&p.column(k).into_owned()) - alphas[k] * q.column(k);
        reorthogonalize(&mut z, &q, rank);
        let beta = z.norm();
        if !beta.is_finite() {
            return Err(Error::NonFinite("Lanczos iterate".into()));
        }
        if rank == k_dim || beta <= eps * scale {
            residual = z;
            break;
        }
        let q_next = z / beta;
        let mut w = op.matvec(&q_next) - beta * p.column(k);
        reorthogonalize(&mut w, &p, rank);
        let alpha = w.norm();
        betas.push(beta);
        q.set_column(rank, &q_next);
        if alpha <= 1e-14 * scale {
            // A maps q_next into span(P): close the basis with α = 0 and a
            // zero left vector, leaving no residual.
            alphas.push(0.0);
            rank += 1;
            residual = Vector::zeros(nc);
            break;
        }
        scale = scale.max(alpha);
        alphas.push(alpha);
        p.set_column(rank, &(w / alpha));
        rank += 1;
    }

    let mut h = Matrix::zeros(rank, rank);
    for (k, a) in alphas.iter().enumerate() {
        h[(k, k)] = *a;
    }
    for (k, b) in betas.iter().enumerate() {
        h[(k, k + 1)] = *b;
    }
    Ok(LanczosBidiag {
        p: p.columns(0, rank).into_owned(),
        q: q.columns(0, rank).into_owned(),
        h,
        residual,
    })
}

#[derive(Debug, Clone)]
pub struct LanczosRank2 {
    pub first: SingularTriplet,
    pub second: SingularTriplet,
    /// Number of bidiagonalization runs performed.
    pub runs: usize,
    pub converged: bool,
    /// `σ₂ ≤ 1e-12 σ₁`: the operator is numerically rank one.
    pub degenerate: bool,
}

const DEGENERATE_RATIO: f64 = 1e-12;

/// Top two singular triplets by restarted Lanczos bidiagonalization.
///
/// After each run the SVD `H = X Σ Y^T` is mapped back as `U = P X`,
/// `V = Q Y`. The run is accepted when both triplets satisfy
/// `max(‖A v − σ u‖, ‖A^T u − σ v‖) ≤ eps · σ₁`; otherwise the next run starts
/// from the normalised sum `v₁ + v₂`.
pub fn restarted_lanczos_rank2(
    op: &dyn RearrangedOp,
    k_dim: usize,
    eps: f64,
    max_restarts: usize,
    warm: Option<&Vector>,
) -> Result<LanczosRank2> {
    let nc = op.ncols();
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "Lanczos precision must be positive, got {eps}"
        )));
    }
    let mut q0 = match warm {
        Some(w) if w.len() == nc && w.norm() > 0.0 && w.iter().all(|x| x.is_finite()) => {
            w / w.norm()
        }
        Some(w) if w.len() != nc => return Err(Error::dims("Lanczos warm start", nc, w.len())),
        _ => random_unit(nc, 0x01a2_c705),
    };
    let k_dim = k_dim.max(2);

    let mut last = None;
    for run in 1..=max_restarts + 1 {
        let basis = lanczos_bidiag(op, k_dim, eps, &q0)?;
        let r = basis.rank();
        if r == 0 {
            let zero = SingularTriplet {
                sigma: 0.0,
                u: Vector::zeros(op.nrows()),
                v: q0.clone(),
            };
            return Ok(LanczosRank2 {
                first: zero.clone(),
                second: zero,
                runs: run,
                converged: false,
                degenerate: true,
            });
        }
        let small = svd_dense(&basis.h)?;
        let triplet = |i: usize| -> SingularTriplet {
            if i >= r {
                return SingularTriplet {
                    sigma: 0.0,
                    u: Vector::zeros(op.nrows()),
                    v: Vector::zeros(nc),
                };
            }
            let u = &basis.p * small.u.column(i);
            let v = &basis.q * small.v.column(i);
            let (un, vn) = (u.norm(), v.norm());
            if un == 0.0 || vn == 0.0 || small.sigma[i] == 0.0 {
                return SingularTriplet {
                    sigma: 0.0,
                    u: Vector::zeros(op.nrows()),
                    v: Vector::zeros(nc),
                };
            }
            let mut t = SingularTriplet {
                sigma: small.sigma[i],
                u: u / un,
                v: v / vn,
            };
            t.normalize_sign();
            t
        };
        let first = triplet(0);
        let second = triplet(1);
        let tol = eps * first.sigma;
        let res = |t: &SingularTriplet| t.residual(op).max(t.adjoint_residual(op));
        let degenerate = second.sigma <= DEGENERATE_RATIO * first.sigma;
        let first_ok = res(&first) <= tol;
        let converged = first_ok && (degenerate || res(&second) <= tol);
        if converged {
            return Ok(LanczosRank2 {
                first,
                second,
                runs: run,
                converged,
                degenerate,
            });
        }
        let restart = &first.v + &second.v;
        let rn = restart.norm();
        q0 = if rn > 0.0 {
            restart / rn
        } else {
            first.v.clone()
        };
        last = Some((first, second, degenerate, run));
    }
    let (first, second, degenerate, runs) = last.expect("at least one Lanczos run");
    log::warn!(
        "restarted Lanczos did not reach precision {eps} after {runs} runs; using last iterate"
    );
    Ok(LanczosRank2 {
        first,
        second,
        runs,
        converged: false,
        degenerate,
    })
}
