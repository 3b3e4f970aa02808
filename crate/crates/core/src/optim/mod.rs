//! Training steps: SGD with momentum, Adam, and natural gradient descent
//! preconditioned by one of the Kronecker factorizations.
//!
//! A natural gradient iteration `k` (0-based) runs:
//!
//! 1. forward pass on the batch;
//! 2. backward pass on the true targets, giving the training gradient;
//! 3. if `k % refresh_period == 0`, a second backward pass from the same
//!    forward pass with targets sampled from the model, whose statistics are
//!    factorized per layer and folded into the running averages;
//! 4. if `k % inverse_period == 0`, damped inverses are rebuilt;
//! 5. every layer gradient is preconditioned;
//! 6. the update is KL-clipped;
//! 7. `θ ← θ − η ν 𝒢`.

mod probe;

pub use probe::{fim_error_probe, fim_errors, ProbeResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::LayerBatchStats;
use crate::kron_approx::{factorize, FactorDiagnostics, Method, SvdOptions, WarmStart};
use crate::linalg::Matrix;
use crate::mlp::{GradientSet, Mlp};
use crate::precond::{kl_clip, DampingSpec, KronApprox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Kfac,
    Kpsvd,
    Deflation,
    Lanczos,
    KfacCorrected,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Kfac,
        OptimizerKind::Kpsvd,
        OptimizerKind::Deflation,
        OptimizerKind::Lanczos,
        OptimizerKind::KfacCorrected,
    ];

    /// The factorization behind a natural gradient optimizer.
    pub fn method(self) -> Option<Method> {
        match self {
            OptimizerKind::Sgd | OptimizerKind::Adam => None,
            OptimizerKind::Kfac => Some(Method::Kfac),
            OptimizerKind::Kpsvd => Some(Method::Kpsvd),
            OptimizerKind::Deflation => Some(Method::Deflation),
            OptimizerKind::Lanczos => Some(Method::Lanczos),
            OptimizerKind::KfacCorrected => Some(Method::KfacCorrected),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            _ => self.method().map(Method::name).unwrap_or_default(),
        }
    }
}

impl From<Method> for OptimizerKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Kfac => OptimizerKind::Kfac,
            Method::Kpsvd => OptimizerKind::Kpsvd,
            Method::Deflation => OptimizerKind::Deflation,
            Method::Lanczos => OptimizerKind::Lanczos,
            Method::KfacCorrected => OptimizerKind::KfacCorrected,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    /// Tikhonov damping `λ`.
    pub damping: f64,
    /// KL clipping budget `c`.
    pub clip: f64,
    /// Running-average decay cap `α`.
    pub ema_decay: f64,
    /// Factor refresh period `T₁`.
    pub refresh_period: usize,
    /// Inverse rebuild period `T₂`.
    pub inverse_period: usize,
    /// SGD heavy-ball momentum.
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub svd: SvdOptions,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerKind::Kfac,
            learning_rate: 0.1,
            damping: 0.1,
            clip: 1e-2,
            ema_decay: 0.95,
            refresh_period: 100,
            inverse_period: 100,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            seed: 0,
            svd: SvdOptions::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0) {
            return bad(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam parameters must satisfy 0 <= beta < 1 and eps > 0".into());
        }
        if self.method.method().is_some() {
            if !(self.learning_rate > 0.0) || !(self.damping > 0.0) {
                return bad(
                    "natural gradient methods need positive learning rate and damping".into(),
                );
            }
            if !(self.clip > 0.0) {
                return bad(format!(
                    "clipping budget must be positive, got {}",
                    self.clip
                ));
            }
            if !(0.0..1.0).contains(&self.ema_decay) {
                return bad(format!(
                    "running-average decay must lie in [0, 1), got {}",
                    self.ema_decay
                ));
            }
            if self.refresh_period == 0 || self.inverse_period == 0 {
                return bad("refresh periods must be at least 1".into());
            }
            if !(self.svd.eps > 0.0) || self.svd.max_iters == 0 || self.svd.krylov_dim < 2 {
                return bad("SVD options need eps > 0, max_iters >= 1 and krylov_dim >= 2".into());
            }
        }
        Ok(())
    }
}

/// `v ← β v + g`, `θ ← θ − η v`.
pub fn sgd_step(
    params: &mut [Matrix],
    grads: &GradientSet,
    velocity: &mut GradientSet,
    lr: f64,
    beta: f64,
) {
    for ((p, g), v) in params
        .iter_mut()
        .zip(grads.layers())
        .zip(velocity.0.iter_mut())
    {
        *v *= beta;
        *v += g;
        *p -= &*v * lr;
    }
}

/// First and second moment estimates of bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: GradientSet,
    pub second: GradientSet,
    pub t: u32,
}

impl AdamState {
    pub fn new(shapes: &[Matrix]) -> Self {
        Self {
            first: GradientSet::zeros_like(shapes),
            second: GradientSet::zeros_like(shapes),
            t: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [Matrix],
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.layers())
        .zip(state.first.0.iter_mut())
        .zip(state.second.0.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// Per-layer natural gradient state.
#[derive(Debug, Clone, Default)]
pub struct LayerState {
    pub approx: KronApprox,
    pub warm: WarmStart,
}

// One per optimizer, so the inline RNG is not worth boxing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum State {
    Sgd(GradientSet),
    Adam(AdamState),
    Natural {
        method: Method,
        layers: Vec<LayerState>,
        rng: ChaCha8Rng,
    },
}

/// What one iteration did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: usize,
    /// Batch loss before the update.
    pub loss: f64,
    pub gradient: GradientSet,
    /// The update before the learning rate: `ν 𝒢` for natural gradient,
    /// the raw gradient otherwise.
    pub direction: GradientSet,
    /// Clip factor, NaN for first-order methods.
    pub nu: f64,
    pub refreshed: bool,
    pub rebuilt: bool,
    /// Per-layer factorization diagnostics on refresh iterations.
    pub diagnostics: Vec<FactorDiagnostics>,
    /// Statistics from the sampled-target backward pass on refresh iterations.
    pub fisher_stats: Option<LayerBatchStats>,
    /// Layers that dropped their correction at this rebuild.
    pub fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    iteration: usize,
    state: State,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &Mlp) -> Result<Self> {
        config.validate()?;
        let state = match config.method.method() {
            None if config.method == OptimizerKind::Sgd => {
                State::Sgd(GradientSet::zeros_like(model.weights()))
            }
            None => State::Adam(AdamState::new(model.weights())),
            Some(method) => State::Natural {
                method,
                layers: vec![LayerState::default(); model.num_layers()],
                rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e61_7475_7261_6c00),
            },
        };
        Ok(Self {
            config,
            iteration: 0,
            state,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Per-layer preconditioner state; empty for first-order methods.
    pub fn layers(&self) -> &[LayerState] {
        match &self.state {
            State::Natural { layers, .. } => layers,
            _ => &[],
        }
    }

    /// One iteration on the batch `(x, y)`.
    pub fn step(&mut self, model: &mut Mlp, x: &Matrix, y: &Matrix) -> Result<StepReport> {
        let k = self.iteration;
        let pass = model.forward(x)?;
        let loss = model.loss(pass.output(), y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss is {loss} at iteration {k}"
            )));
        }
        let (gradient, _) = model.backward(&pass, y)?;
        if !gradient.norm().is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at iteration {k}, loss {loss}"
            )));
        }
        let cfg = &self.config;
        let mut report = StepReport {
            iteration: k,
            loss,
            direction: gradient.clone(),
            gradient,
            nu: f64::NAN,
            refreshed: false,
            rebuilt: false,
            diagnostics: Vec::new(),
            fisher_stats: None,
            fallbacks: 0,
        };
        match &mut self.state {
            State::Sgd(velocity) => sgd_step(
                model.weights_mut(),
                &report.gradient,
                velocity,
                cfg.learning_rate,
                cfg.momentum,
            ),
            State::Adam(state) => adam_step(
                model.weights_mut(),
                &report.gradient,
                state,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            ),
            State::Natural {
                method,
                layers,
                rng,
            } => {
                if k % cfg.refresh_period == 0 {
                    let sampled = model.sample_targets(pass.output(), rng)?;
                    let (_, stats) = model.backward(&pass, &sampled)?;
                    report.diagnostics = refresh(*method, layers, &stats, cfg)?;
                    report.fisher_stats = Some(stats);
                    report.refreshed = true;
                }
                if k % cfg.inverse_period == 0 {
                    let damping = DampingSpec::new(cfg.damping)?;
                    layers
                        .par_iter_mut()
                        .map(|l| l.approx.rebuild(damping))
                        .collect::<Result<Vec<()>>>()?;
                    report.fallbacks = layers.iter().filter(|l| l.approx.fell_back()).count();
                    report.rebuilt = true;
                }
                let precond = layers
                    .par_iter()
                    .zip(report.gradient.layers())
                    .map(|(l, g)| l.approx.apply(g))
                    .collect::<Result<Vec<_>>>()?;
                let (nu, direction) = kl_clip(&GradientSet(precond), &report.gradient, cfg.clip)?;
                for (p, d) in model.weights_mut().iter_mut().zip(direction.layers()) {
                    *p -= d * cfg.learning_rate;
                }
                report.nu = nu;
                report.direction = direction;
            }
        }
        self.iteration += 1;
        Ok(report)
    }
}

/// Factorizes every layer in parallel and folds the results into the running averages.
fn refresh(
    method: Method,
    layers: &mut [LayerState],
    stats: &LayerBatchStats,
    cfg: &OptimizerConfig,
) -> Result<Vec<FactorDiagnostics>> {
    layers
        .par_iter_mut()
        .zip(stats.layers())
        .map(|(layer, s)| {
            let fac = factorize(method, s, &cfg.svd, &mut layer.warm)?;
            layer.approx.update(fac.factors, cfg.ema_decay)?;
            Ok(fac.diagnostics)
        })
        .collect()
}

#[cfg(test)]
mod tests;
