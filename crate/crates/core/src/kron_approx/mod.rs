//! Kronecker-factored approximations of a layer's Fisher block.
//!
//! Every method reaches the block only through `Z(F) v` and `Z(F)^T u`
//! ([`RearrangedOp`]); nothing here materialises `F` or `Z(F)`.
//!
//! | method          | form                | factors                                  |
//! |-----------------|---------------------|------------------------------------------|
//! | KFAC            | `A ⊗ G`             | batch moments `E[ā āᵀ]`, `E[g gᵀ]`        |
//! | KPSVD           | `R ⊗ S`             | dominant singular pair of `Z(F)`          |
//! | Deflation       | `R ⊗ S + P ⊗ Q`     | KPSVD, then dominant pair of the residual |
//! | Lanczos         | `R ⊗ S + P ⊗ Q`     | top two pairs of `Z(F)` at once           |
//! | KFAC-corrected  | `A ⊗ G + P ⊗ Q`     | KFAC, then dominant pair of the residual  |

mod lanczos;
mod operator;
mod power;

pub use lanczos::{lanczos_bidiag, restarted_lanczos_rank2, LanczosBidiag, LanczosRank2};
pub use operator::{residual_op, CountingOp, DenseOp, FisherOp, RearrangedOp, ResidualOp};
pub use power::{power_svd, random_unit, PowerSvd, SingularTriplet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::LayerStats;
use crate::linalg::{kron, mat_square, sym_eig, symmetrize, vec, Matrix, Vector};

/// `left ⊗ right`, with `left` on the augmented-activation side
/// (`d_{i-1}+1` square) and `right` on the preactivation-derivative side.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPair {
    pub left: Matrix,
    pub right: Matrix,
}

impl KronPair {
    pub fn new(left: Matrix, right: Matrix) -> Self {
        Self { left, right }
    }

    pub fn zeros(d: usize, d_prime: usize) -> Self {
        Self::new(Matrix::zeros(d, d), Matrix::zeros(d_prime, d_prime))
    }

    pub fn to_dense(&self) -> Matrix {
        kron(&self.left, &self.right)
    }

    fn symmetrized(self) -> Self {
        Self::new(symmetrize(&self.left), symmetrize(&self.right))
    }
}

/// Settings shared by the iterative singular value solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdOptions {
    /// Relative precision of the residual stopping test.
    pub eps: f64,
    /// Power SVD sweep cap.
    pub max_iters: usize,
    /// Krylov subspace dimension of one Lanczos run.
    pub krylov_dim: usize,
    pub max_restarts: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_iters: 500,
            krylov_dim: 6,
            max_restarts: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "kfac")]
    Kfac,
    #[serde(rename = "kpsvd")]
    Kpsvd,
    #[serde(rename = "deflation")]
    Deflation,
    #[serde(rename = "lanczos")]
    Lanczos,
    #[serde(rename = "kfac_corrected")]
    KfacCorrected,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Kfac,
        Method::Kpsvd,
        Method::Deflation,
        Method::Lanczos,
        Method::KfacCorrected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kfac => "kfac",
            Method::Kpsvd => "kpsvd",
            Method::Deflation => "deflation",
            Method::Lanczos => "lanczos",
            Method::KfacCorrected => "kfac_corrected",
        }
    }

    pub fn is_rank2(self) -> bool {
        matches!(
            self,
            Method::Deflation | Method::Lanczos | Method::KfacCorrected
        )
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown factorization method `{s}`")))
    }
}

/// A rank-1 or rank-2 Kronecker factorization of one Fisher block.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Rank1(KronPair),
    Rank2 {
        dominant: KronPair,
        correction: KronPair,
    },
}

impl Factors {
    pub fn dominant(&self) -> &KronPair {
        match self {
            Factors::Rank1(p) => p,
            Factors::Rank2 { dominant, .. } => dominant,
        }
    }

    pub fn correction(&self) -> Option<&KronPair> {
        match self {
            Factors::Rank1(_) => None,
            Factors::Rank2 { correction, .. } => Some(correction),
        }
    }

    /// Dense approximation of the block. Probe and test use only.
    pub fn to_dense(&self) -> Matrix {
        let mut f = self.dominant().to_dense();
        if let Some(c) = self.correction() {
            f += c.to_dense();
        }
        f
    }
}

/// Per-layer singular vectors kept between refreshes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    pub dominant: Option<Vector>,
    pub correction: Option<Vector>,
    pub lanczos: Option<Vector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorDiagnostics {
    pub sigma1: f64,
    /// NaN for rank-1 methods.
    pub sigma2: f64,
    /// Power sweeps (summed over both solves for two-stage methods) or
    /// Lanczos runs.
    pub iterations: usize,
    pub converged: bool,
    /// The second pair is numerically zero; the factors fell back to rank 1.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub factors: Factors,
    pub diagnostics: FactorDiagnostics,
}

/// KFAC factors `(E[ā āᵀ], E[g gᵀ])` from batch averages.
pub fn kfac_factors(stats: &LayerStats) -> KronPair {
    let m = stats.batch_size() as f64;
    let left = stats.abar().tr_mul(stats.abar()) / m;
    let right = stats.g().tr_mul(stats.g()) / m;
    KronPair::new(symmetrize(&left), symmetrize(&right))
}

/// Replaces the eigenvalues of the symmetric part of `m` by their absolute values.
pub fn psd_select(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    Ok(symmetrize(&eig.map(f64::abs)))
}

/// `(√σ mat(u), √σ mat(v))` without symmetrization.
pub fn pair_from_triplet(t: &SingularTriplet) -> Result<KronPair> {
    let s = t.sigma.sqrt();
    Ok(KronPair::new(s * mat_square(&t.u)?, s * mat_square(&t.v)?))
}

fn check_dims(op: &dyn RearrangedOp) -> Result<()> {
    if crate::linalg::exact_sqrt(op.nrows()).is_none()
        || crate::linalg::exact_sqrt(op.ncols()).is_none()
    {
        return Err(Error::dims(
            "rearranged operator",
            "d^2 x d'^2",
            format!("{}x{}", op.nrows(), op.ncols()),
        ));
    }
    Ok(())
}

/// Best single Kronecker product from the dominant singular pair of `op`.
/// The pair is symmetrized and both factors PSD-selected.
pub fn kpsvd_from_op(
    op: &dyn RearrangedOp,
    opts: &SvdOptions,
    init: Option<&Vector>,
) -> Result<(KronPair, PowerSvd)> {
    check_dims(op)?;
    let svd = power_svd(op, opts.eps, opts.max_iters, init)?;
    let raw = pair_from_triplet(&svd.triplet)?.symmetrized();
    let pair = KronPair::new(psd_select(&raw.left)?, psd_select(&raw.right)?);
    Ok((pair, svd))
}

/// Best correction `P ⊗ Q` to a given dominant pair: the dominant singular
/// pair of `Z(F − dominant)`, symmetrized but not PSD-projected.
pub fn correction_from_op(
    op: &dyn RearrangedOp,
    dominant: &KronPair,
    opts: &SvdOptions,
    init: Option<&Vector>,
) -> Result<(KronPair, PowerSvd)> {
    check_dims(op)?;
    let residual = residual_op(op, dominant);
    let svd = power_svd(&residual, opts.eps, opts.max_iters, init)?;
    let pair = pair_from_triplet(&svd.triplet)?.symmetrized();
    Ok((pair, svd))
}

#[derive(Debug, Clone)]
pub struct KpsvdOutcome {
    pub pair: KronPair,
    pub svd: PowerSvd,
}

#[derive(Debug, Clone)]
pub struct Rank2Outcome {
    pub dominant: KronPair,
    /// `None` when the second singular value is numerically zero.
    pub correction: Option<KronPair>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Right singular vector(s) to warm start the next refresh with.
    pub warm_dominant: Vector,
    pub warm_correction: Vector,
}

impl Rank2Outcome {
    pub fn factors(&self) -> Factors {
        match &self.correction {
            Some(c) => Factors::Rank2 {
                dominant: self.dominant.clone(),
                correction: c.clone(),
            },
            None => Factors::Rank1(self.dominant.clone()),
        }
    }
}

/// Default power SVD start: `vec(G_KFAC) / ‖G_KFAC‖`.
fn kfac_start(stats: &LayerStats) -> Option<Vector> {
    let right = vec(&kfac_factors(stats).right);
    let n = right.norm();
    (n > 0.0).then(|| right / n)
}

pub fn kpsvd_factors(
    stats: &LayerStats,
    opts: &SvdOptions,
    warm: Option<&Vector>,
) -> Result<KpsvdOutcome> {
    let init = warm.cloned().or_else(|| kfac_start(stats));
    let (pair, svd) = kpsvd_from_op(&FisherOp::new(stats), opts, init.as_ref())?;
    Ok(KpsvdOutcome { pair, svd })
}

const DEGENERATE_RATIO: f64 = 1e-12;

/// Result of the first (dominant) stage of a two-stage method.
struct FirstStage {
    dominant: KronPair,
    sigma1: f64,
    iterations: usize,
    converged: bool,
    warm: Vector,
}

fn rank2_from_dominant(
    op: &dyn RearrangedOp,
    first: FirstStage,
    opts: &SvdOptions,
    warm_correction: Option<&Vector>,
) -> Result<Rank2Outcome> {
    let (pair, svd) = correction_from_op(op, &first.dominant, opts, warm_correction)?;
    let sigma2 = svd.triplet.sigma;
    let degenerate = svd.zero_operator || sigma2 <= DEGENERATE_RATIO * first.sigma1;
    Ok(Rank2Outcome {
        dominant: first.dominant,
        correction: (!degenerate).then_some(pair),
        sigma1: first.sigma1,
        sigma2,
        iterations: first.iterations + svd.iterations,
        converged: first.converged && (svd.converged || degenerate),
        warm_dominant: first.warm,
        warm_correction: svd.triplet.v,
    })
}

/// Deflation on an arbitrary rearranged operator.
pub fn deflation_from_op(
    op: &dyn RearrangedOp,
    opts: &SvdOptions,
    init: Option<&Vector>,
    init_correction: Option<&Vector>,
) -> Result<Rank2Outcome> {
    let (dominant, svd) = kpsvd_from_op(op, opts, init)?;
    let first = FirstStage {
        dominant,
        sigma1: svd.triplet.sigma,
        iterations: svd.iterations,
        converged: svd.converged,
        warm: svd.triplet.v,
    };
    rank2_from_dominant(op, first, opts, init_correction)
}

/// KPSVD pair followed by the best Kronecker correction of its residual.
pub fn deflation_factors(
    stats: &LayerStats,
    opts: &SvdOptions,
    warm: &WarmStart,
) -> Result<Rank2Outcome> {
    let init = warm.dominant.clone().or_else(|| kfac_start(stats));
    deflation_from_op(
        &FisherOp::new(stats),
        opts,
        init.as_ref(),
        warm.correction.as_ref(),
    )
}

/// Correction of an arbitrary given dominant pair.
pub fn corrected_from_op(
    op: &dyn RearrangedOp,
    dominant: &KronPair,
    opts: &SvdOptions,
    init_correction: Option<&Vector>,
) -> Result<Rank2Outcome> {
    let first = FirstStage {
        dominant: dominant.clone(),
        sigma1: dominant.left.norm() * dominant.right.norm(),
        iterations: 0,
        converged: true,
        warm: Vector::zeros(0),
    };
    rank2_from_dominant(op, first, opts, init_correction)
}

/// KFAC pair plus the best Kronecker corrector of its residual.
pub fn kfac_corrected_factors(
    stats: &LayerStats,
    opts: &SvdOptions,
    warm: &WarmStart,
) -> Result<Rank2Outcome> {
    corrected_from_op(
        &FisherOp::new(stats),
        &kfac_factors(stats),
        opts,
        warm.correction.as_ref(),
    )
}

/// Top two Kronecker terms from restarted Lanczos bidiagonalization.
pub fn lanczos_from_op(
    op: &dyn RearrangedOp,
    opts: &SvdOptions,
    init: Option<&Vector>,
) -> Result<Rank2Outcome> {
    check_dims(op)?;
    let out = restarted_lanczos_rank2(op, opts.krylov_dim, opts.eps, opts.max_restarts, init)?;
    let raw = pair_from_triplet(&out.first)?.symmetrized();
    let dominant = KronPair::new(psd_select(&raw.left)?, psd_select(&raw.right)?);
    let correction = if out.degenerate {
        None
    } else {
        Some(pair_from_triplet(&out.second)?.symmetrized())
    };
    let warm = &out.first.v + &out.second.v;
    Ok(Rank2Outcome {
        dominant,
        correction,
        sigma1: out.first.sigma,
        sigma2: out.second.sigma,
        iterations: out.runs,
        converged: out.converged,
        warm_dominant: warm,
        warm_correction: out.second.v,
    })
}

pub fn lanczos_factors(
    stats: &LayerStats,
    opts: &SvdOptions,
    warm: &WarmStart,
) -> Result<Rank2Outcome> {
    let init = warm.lanczos.clone().or_else(|| kfac_start(stats));
    lanczos_from_op(&FisherOp::new(stats), opts, init.as_ref())
}

/// Runs `method` on one layer and updates its warm-start vectors.
pub fn factorize(
    method: Method,
    stats: &LayerStats,
    opts: &SvdOptions,
    warm: &mut WarmStart,
) -> Result<Factorization> {
    match method {
        Method::Kfac => {
            let pair = kfac_factors(stats);
            Ok(Factorization {
                factors: Factors::Rank1(pair),
                diagnostics: FactorDiagnostics {
                    sigma1: f64::NAN,
                    sigma2: f64::NAN,
                    iterations: 0,
                    converged: true,
                    degenerate: false,
                },
            })
        }
        Method::Kpsvd => {
            let out = kpsvd_factors(stats, opts, warm.dominant.as_ref())?;
            if !out.svd.zero_operator {
                warm.dominant = Some(out.svd.triplet.v.clone());
            }
            Ok(Factorization {
                factors: Factors::Rank1(out.pair),
                diagnostics: FactorDiagnostics {
                    sigma1: out.svd.triplet.sigma,
                    sigma2: f64::NAN,
                    iterations: out.svd.iterations,
                    converged: out.svd.converged,
                    degenerate: false,
                },
            })
        }
        Method::Deflation | Method::KfacCorrected | Method::Lanczos => {
            let out = match method {
                Method::Deflation => deflation_factors(stats, opts, warm)?,
                Method::KfacCorrected => kfac_corrected_factors(stats, opts, warm)?,
                _ => lanczos_factors(stats, opts, warm)?,
            };
            let usable = |v: &Vector| !v.is_empty() && v.norm() > 0.0;
            match method {
                Method::Lanczos if usable(&out.warm_dominant) => {
                    warm.lanczos = Some(out.warm_dominant.clone())
                }
                Method::Deflation if usable(&out.warm_dominant) => {
                    warm.dominant = Some(out.warm_dominant.clone())
                }
                _ => {}
            }
            if method != Method::Lanczos && out.correction.is_some() && usable(&out.warm_correction)
            {
                warm.correction = Some(out.warm_correction.clone());
            }
            Ok(Factorization {
                factors: out.factors(),
                diagnostics: FactorDiagnostics {
                    sigma1: out.sigma1,
                    sigma2: out.sigma2,
                    iterations: out.iterations,
                    converged: out.converged,
                    degenerate: out.correction.is_none(),
                },
            })
        }
    }
}

#[cfg(test)]
mod tests;
