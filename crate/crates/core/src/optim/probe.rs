use rand::Rng;

use crate::error::{Error, Result};
use crate::fisher::exact_fim_block;
use crate::kron_approx::{factorize, FactorDiagnostics, Method, SvdOptions, WarmStart};
use crate::linalg::{spectrum, Matrix};
use crate::mlp::Mlp;

/// Approximation quality of one method on one probed block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub method: Method,
    /// `‖F − F̂‖_F / ‖F‖_F`.
    pub error1: f64,
    /// `‖λ(F) − λ(F̂)‖₂ / ‖λ(F)‖₂`, spectra sorted descending.
    pub error2: f64,
    pub diagnostics: FactorDiagnostics,
}

/// Relative Frobenius and spectral errors of `approx` against `exact`.
pub fn fim_errors(exact: &Matrix, approx: &Matrix) -> Result<(f64, f64)> {
    if exact.shape() != approx.shape() {
        return Err(Error::dims(
            "probe approximation",
            format!("{:?}", exact.shape()),
            format!("{:?}", approx.shape()),
        ));
    }
    let norm = exact.norm();
    if norm == 0.0 {
        return Err(Error::Domain("probed Fisher block is zero".into()));
    }
    let s = spectrum(exact)?;
    let s_hat = spectrum(approx)?;
    Ok((
        (exact - approx).norm() / norm,
        (&s - &s_hat).norm() / s.norm(),
    ))
}

/// Compares every method's factorization of one layer's Fisher block with
/// the exact block, both built from the same batch with targets sampled
/// from the model. No running average is applied.
pub fn fim_error_probe(
    model: &Mlp,
    x: &Matrix,
    layer: usize,
    methods: &[Method],
    opts: &SvdOptions,
    rng: &mut impl Rng,
) -> Result<Vec<ProbeResult>> {
    if layer >= model.num_layers() {
        return Err(Error::Config(format!(
            "probe layer {} out of range for a {}-layer network",
            layer + 1,
            model.num_layers()
        )));
    }
    let pass = model.forward(x)?;
    let sampled = model.sample_targets(pass.output(), rng)?;
    let (_, stats) = model.backward(&pass, &sampled)?;
    let stats = stats.layer(layer)?;
    let exact = exact_fim_block(stats)?;
    methods
        .iter()
        .map(|&method| {
            let fac = factorize(method, stats, opts, &mut WarmStart::default())?;
            let (error1, error2) = fim_errors(&exact, &fac.factors.to_dense())?;
            Ok(ProbeResult {
                method,
                error1,
                error2,
                diagnostics: fac.diagnostics,
            })
        })
        .collect()
}
