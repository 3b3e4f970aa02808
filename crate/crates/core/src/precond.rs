//! Turning Kronecker factorizations into invertible preconditioners.
//!
//! A layer gradient `∇W` is a `d' x d` matrix (rows: output units, columns:
//! bias plus inputs), so `(L ⊗ R) vec(∇W) = vec(R ∇W Lᵀ)` with `L` on the
//! activation side. Rank-1 factors are inverted factor by factor. Rank-2
//! factors `A ⊗ B + C ⊗ D` go through a simultaneous diagonalization of the
//! two pencils `(A, C)` and `(B, D)`, which costs `O(d³)` and never forms a
//! `d² x d²` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron_approx::{Factors, KronPair};
use crate::linalg::{
    inv_sqrt, kron, spd_inverse, spd_solve, sym_eig, symmetrize, trace, Matrix, Vector,
};
use crate::mlp::GradientSet;

/// Decay used at the `k`-th refresh (1-based): `min(1 − 1/k, α)`.
pub fn ema_rho(k: usize, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    (1.0 - 1.0 / k as f64).min(alpha)
}

/// `ρ old + (1 − ρ) new`, factor by factor.
pub fn ema_update(old: &KronPair, new: &KronPair, k: usize, alpha: f64) -> Result<KronPair> {
    if old.left.shape() != new.left.shape() || old.right.shape() != new.right.shape() {
        return Err(Error::dims(
            "running average factors",
            format!("{:?}/{:?}", old.left.shape(), old.right.shape()),
            format!("{:?}/{:?}", new.left.shape(), new.right.shape()),
        ));
    }
    let rho = ema_rho(k, alpha);
    Ok(KronPair::new(
        &old.left * rho + &new.left * (1.0 - rho),
        &old.right * rho + &new.right * (1.0 - rho),
    ))
}

/// Running average of rank-1 or rank-2 factors. A missing correction on
/// either side averages as zero.
pub fn ema_update_factors(old: &Factors, new: &Factors, k: usize, alpha: f64) -> Result<Factors> {
    let dominant = ema_update(old.dominant(), new.dominant(), k, alpha)?;
    let zeros = |p: &KronPair| KronPair::zeros(p.left.nrows(), p.right.nrows());
    match (old.correction(), new.correction()) {
        (None, None) => Ok(Factors::Rank1(dominant)),
        (o, n) => {
            let o = o.cloned().unwrap_or_else(|| zeros(old.dominant()));
            let n = n.cloned().unwrap_or_else(|| zeros(new.dominant()));
            Ok(Factors::Rank2 {
                dominant,
                correction: ema_update(&o, &n, k, alpha)?,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampingSpec {
    pub lambda: f64,
}

impl DampingSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "damping must be a nonnegative number, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

/// `sqrt((tr(L)/dim L) / (tr(R)/dim R))`, or `None` when either trace is not positive.
pub fn damping_ratio(left: &Matrix, right: &Matrix) -> Option<f64> {
    let l = trace(left) / left.nrows() as f64;
    let r = trace(right) / right.nrows() as f64;
    (l > 0.0 && r > 0.0 && l.is_finite() && r.is_finite()).then(|| (l / r).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DampedPair {
    pub pair: KronPair,
    pub pi: f64,
    /// The trace ratio was undefined and `pi = 1` was used.
    pub fallback: bool,
}

/// `(L + π√λ I, R + √λ/π I)`.
pub fn damp_pair(left: &Matrix, right: &Matrix, damping: DampingSpec) -> DampedPair {
    let (pi, fallback) = match damping_ratio(left, right) {
        Some(pi) => (pi, false),
        None => {
            log::warn!("factor trace is not positive; damping with pi = 1");
            (1.0, true)
        }
    };
    let s = damping.lambda.sqrt();
    let left = left + Matrix::identity(left.nrows(), left.ncols()) * (pi * s);
    let right = right + Matrix::identity(right.nrows(), right.ncols()) * (s / pi);
    DampedPair {
        pair: KronPair::new(left, right),
        pi,
        fallback,
    }
}

fn check_grad(left: &Matrix, right: &Matrix, grad: &Matrix) -> Result<()> {
    if grad.nrows() != right.nrows() || grad.ncols() != left.nrows() {
        return Err(Error::dims(
            "layer gradient",
            format!("{}x{}", right.nrows(), left.nrows()),
            format!("{}x{}", grad.nrows(), grad.ncols()),
        ));
    }
    Ok(())
}

/// `R⁻¹ ∇W L⁻¹`, i.e. `mat((L ⊗ R)⁻¹ vec(∇W))`, for SPD `L`, `R`.
pub fn apply_rank1_inverse(left: &Matrix, right: &Matrix, grad: &Matrix) -> Result<Matrix> {
    check_grad(left, right, grad)?;
    let x = spd_solve(right, grad)?;
    Ok(spd_solve(left, &x.transpose())?.transpose())
}

/// Reduced form of `A ⊗ B + C ⊗ D` with `A`, `B` SPD and `C`, `D` symmetric:
/// `K₁ᵀ A K₁ = I`, `K₁ᵀ C K₁ = diag(s₁)` and likewise `K₂` for `(B, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronSumCache {
    pub k1: Matrix,
    pub k2: Matrix,
    pub s1: Vector,
    pub s2: Vector,
    /// `1 + s₂ s₁ᵀ` after safeguarding.
    denominator: Matrix,
    safeguarded: usize,
}

/// Denominator entries smaller than this in magnitude are replaced by `±δ`.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;
/// Fraction of safeguarded entries above which the rank-2 solve is abandoned.
pub const MAX_SAFEGUARDED_FRACTION: f64 = 0.01;

fn reduce_pencil(spd: &Matrix, sym: &Matrix) -> Result<(Matrix, Vector)> {
    if spd.shape() != sym.shape() || spd.nrows() != spd.ncols() {
        return Err(Error::dims(
            "Kronecker sum factor",
            format!("{:?}", spd.shape()),
            format!("{:?}", sym.shape()),
        ));
    }
    let w = inv_sqrt(spd)?;
    let eig = sym_eig(&(&w * symmetrize(sym) * &w))?;
    Ok((w * eig.eigenvectors, eig.eigenvalues))
}

pub fn kron_sum_prepare(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> Result<KronSumCache> {
    let (k1, s1) = reduce_pencil(a, c)?;
    let (k2, s2) = reduce_pencil(b, d)?;
    let mut safeguarded = 0;
    let denominator = Matrix::from_fn(s2.len(), s1.len(), |i, j| {
        let v = 1.0 + s2[i] * s1[j];
        if v.abs() < DENOMINATOR_FLOOR {
            safeguarded += 1;
            if v < 0.0 {
                -DENOMINATOR_FLOOR
            } else {
                DENOMINATOR_FLOOR
            }
        } else {
            v
        }
    });
    Ok(KronSumCache {
        k1,
        k2,
        s1,
        s2,
        denominator,
        safeguarded,
    })
}

impl KronSumCache {
    pub fn safeguarded(&self) -> usize {
        self.safeguarded
    }

    /// More than 1% of the denominator had to be safeguarded.
    pub fn is_ill_conditioned(&self) -> bool {
        self.safeguarded as f64 > MAX_SAFEGUARDED_FRACTION * self.denominator.len() as f64
    }
}

/// `K₂ [(K₂ᵀ V K₁) ⊘ (1 1ᵀ + s₂ s₁ᵀ)] K₁ᵀ`.
pub fn kron_sum_apply(cache: &KronSumCache, v: &Matrix) -> Result<Matrix> {
    check_grad(&cache.k1, &cache.k2, v)?;
    let inner = cache.k2.tr_mul(v) * &cache.k1;
    let scaled = inner.component_div(&cache.denominator);
    Ok(&cache.k2 * scaled * cache.k1.transpose())
}

/// `⟨X, Y⟩` as the sum of elementwise products.
fn inner(x: &Matrix, y: &Matrix) -> f64 {
    x.dot(y)
}

/// Scales preconditioned gradients by `ν = min(1, sqrt(c / Σᵢ |⟨𝒢ᵢ, ∇ᵢ⟩|))`.
pub fn kl_clip(precond: &GradientSet, raw: &GradientSet, c: f64) -> Result<(f64, GradientSet)> {
    if !(c > 0.0) {
        return Err(Error::Config(format!(
            "clipping budget must be positive, got {c}"
        )));
    }
    if precond.layers().len() != raw.layers().len() {
        return Err(Error::dims(
            "clipped layers",
            raw.layers().len(),
            precond.layers().len(),
        ));
    }
    let mut total = 0.0;
    for (p, r) in precond.layers().iter().zip(raw.layers()) {
        if p.shape() != r.shape() {
            return Err(Error::dims(
                "clipped layer",
                format!("{:?}", r.shape()),
                format!("{:?}", p.shape()),
            ));
        }
        total += inner(p, r).abs();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("clipping inner product".into()));
    }
    let nu = if total > 0.0 {
        (c / total).sqrt().min(1.0)
    } else {
        1.0
    };
    let mut scaled = precond.clone();
    scaled.scale(nu);
    Ok((nu, scaled))
}

/// Inverse ready to apply to gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum InverseCache {
    Rank1 { left_inv: Matrix, right_inv: Matrix },
    Rank2(KronSumCache),
}

/// Damped factors the current inverse was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedFactors {
    pub dominant: DampedPair,
    /// Undamped correction, absent for rank-1 factors or after a fallback.
    pub correction: Option<KronPair>,
}

impl DampedFactors {
    /// Dense damped approximation. Test oracles and probes only.
    pub fn to_dense(&self) -> Matrix {
        let mut f = self.dominant.pair.to_dense();
        if let Some(c) = &self.correction {
            f += kron(&c.left, &c.right);
        }
        f
    }
}

/// Per-layer preconditioner state: averaged factors and the inverse built
/// from them at the last rebuild.
#[derive(Debug, Clone, Default)]
pub struct KronApprox {
    factors: Option<Factors>,
    refreshes: usize,
    version: u64,
    cache: Option<(u64, InverseCache)>,
    damped: Option<DampedFactors>,
    fell_back: bool,
}

impl KronApprox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn factors(&self) -> Option<&Factors> {
        self.factors.as_ref()
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// The inverse predates the latest factor update.
    pub fn is_stale(&self) -> bool {
        !matches!(&self.cache, Some((v, _)) if *v == self.version)
    }

    pub fn damped(&self) -> Option<&DampedFactors> {
        self.damped.as_ref()
    }

    /// The last rebuild dropped an ill-conditioned correction.
    pub fn fell_back(&self) -> bool {
        self.fell_back
    }

    /// Folds freshly computed factors into the running average.
    pub fn update(&mut self, fresh: Factors, alpha: f64) -> Result<()> {
        self.refreshes += 1;
        let next = match &self.factors {
            Some(old) => ema_update_factors(old, &fresh, self.refreshes, alpha)?,
            None => fresh,
        };
        self.factors = Some(next);
        self.version += 1;
        Ok(())
    }

    /// Damps the dominant pair, keeps any correction undamped, and rebuilds the inverse.
    pub fn rebuild(&mut self, damping: DampingSpec) -> Result<()> {
        let factors = self
            .factors
            .as_ref()
            .ok_or_else(|| Error::Config("preconditioner has no factors yet".into()))?;
        let dom = factors.dominant();
        let dominant = damp_pair(&dom.left, &dom.right, damping);
        self.fell_back = false;
        let (cache, correction) = match factors.correction() {
            Some(corr) => {
                let sum = kron_sum_prepare(
                    &dominant.pair.left,
                    &dominant.pair.right,
                    &corr.left,
                    &corr.right,
                )?;
                if sum.is_ill_conditioned() {
                    log::warn!(
                        "{} of {} Kronecker-sum denominators safeguarded; using the rank-1 inverse this refresh",
                        sum.safeguarded(),
                        sum.denominator.len()
                    );
                    self.fell_back = true;
                    (rank1_cache(&dominant.pair)?, None)
                } else {
                    (InverseCache::Rank2(sum), Some(corr.clone()))
                }
            }
            None => (rank1_cache(&dominant.pair)?, None),
        };
        self.cache = Some((self.version, cache));
        self.damped = Some(DampedFactors {
            dominant,
            correction,
        });
        Ok(())
    }

    /// Preconditioned gradient from the most recently built inverse.
    pub fn apply(&self, grad: &Matrix) -> Result<Matrix> {
        match &self.cache {
            Some((
                _,
                InverseCache::Rank1 {
                    left_inv,
                    right_inv,
                },
            )) => {
                check_grad(left_inv, right_inv, grad)?;
                Ok(right_inv * grad * left_inv)
            }
            Some((_, InverseCache::Rank2(sum))) => kron_sum_apply(sum, grad),
            None => Err(Error::Config(
                "preconditioner inverse has not been built".into(),
            )),
        }
    }
}

fn rank1_cache(pair: &KronPair) -> Result<InverseCache> {
    Ok(InverseCache::Rank1 {
        left_inv: spd_inverse(&pair.left)?,
        right_inv: spd_inverse(&pair.right)?,
    })
}
