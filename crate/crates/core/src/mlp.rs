//! Fully connected network with explicit forward and backward passes.
//!
//! Samples are rows. Layer `i` holds `W_i` of shape `d_i x (d_{i-1}+1)` whose
//! first column multiplies the constant 1 of the augmented activation `ā`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{LayerBatchStats, LayerStats};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "ReLU")]
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, s: f64) -> f64 {
        match self {
            // Not `s.max(0.0)`, which would swallow NaN.
            Activation::Relu => {
                if s < 0.0 {
                    0.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => sigmoid(s),
            Activation::Linear => s,
        }
    }

    /// Derivative in terms of the preactivation `s` and activation `a = σ(s)`.
    /// The ReLU subgradient at 0 is 0.
    fn derivative(self, s: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "ReLU",
            Activation::Sigmoid => "Sigmoid",
            Activation::Linear => "Linear",
        }
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Loss summed over output units, averaged over the batch.
///
/// `BinaryCrossEntropy` is the negative log-likelihood of independent
/// Bernoulli outputs; `MeanSquaredError` is `½‖y − z‖²`, the negative
/// log-likelihood of a unit-variance Gaussian up to a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    BinaryCrossEntropy,
    MeanSquaredError,
}

impl LossKind {
    fn sample_loss(self, z: f64, y: f64) -> f64 {
        match self {
            LossKind::BinaryCrossEntropy => {
                let z = z.clamp(1e-12, 1.0 - 1e-12);
                -(y * z.ln() + (1.0 - y) * (1.0 - z).ln())
            }
            LossKind::MeanSquaredError => 0.5 * (z - y) * (z - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    activations: Vec<Activation>,
    loss: LossKind,
}

/// Activations `a_0..a_ℓ` and preactivations `s_1..s_ℓ` of one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Matrix>,
    pub preactivations: Vec<Matrix>,
}

impl ForwardPass {
    pub fn output(&self) -> &Matrix {
        self.activations
            .last()
            .expect("forward pass has an input layer")
    }
}

/// Batch-averaged weight gradients, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub Vec<Matrix>);

impl GradientSet {
    pub fn zeros_like(weights: &[Matrix]) -> Self {
        GradientSet(
            weights
                .iter()
                .map(|w| Matrix::zeros(w.nrows(), w.ncols()))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.0
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Prepends a column of ones.
pub fn augment(a: &Matrix) -> Matrix {
    let mut out = Matrix::from_element(a.nrows(), a.ncols() + 1, 1.0);
    out.columns_mut(1, a.ncols()).copy_from(a);
    out
}

impl Mlp {
    /// Network with zero weights.
    pub fn new(
        layer_dims: Vec<usize>,
        activations: Vec<Activation>,
        loss: LossKind,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(Error::dims(
                "activations",
                layer_dims.len() - 1,
                activations.len(),
            ));
        }
        if loss == LossKind::BinaryCrossEntropy && activations.last() != Some(&Activation::Sigmoid)
        {
            return Err(Error::Config(
                "binary cross entropy requires a Sigmoid output layer".into(),
            ));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0] + 1))
            .collect();
        Ok(Self {
            layer_dims,
            weights,
            activations,
            loss,
        })
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
    pub fn init(
        layer_dims: Vec<usize>,
        activations: Vec<Activation>,
        loss: LossKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut model = Self::new(layer_dims, activations, loss)?;
        for w in &mut model.weights {
            let (fan_out, fan_in) = (w.nrows(), w.ncols() - 1);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for c in 1..w.ncols() {
                for r in 0..w.nrows() {
                    w[(r, c)] = rng.random_range(-limit..limit);
                }
            }
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// `p = Σ d_i (d_{i-1} + 1)`.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.ncols() != self.layer_dims[0] {
            return Err(Error::dims(
                "forward input columns",
                self.layer_dims[0],
                x.ncols(),
            ));
        }
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        let mut preactivations = Vec::with_capacity(self.num_layers());
        activations.push(x.clone());
        for (w, act) in self.weights.iter().zip(&self.activations) {
            let abar = augment(activations.last().unwrap());
            let s = abar * w.transpose();
            let a = s.map(|v| act.apply(v));
            preactivations.push(s);
            activations.push(a);
        }
        Ok(ForwardPass {
            activations,
            preactivations,
        })
    }

    /// Mean over samples of the per-sample loss.
    pub fn loss(&self, outputs: &Matrix, targets: &Matrix) -> Result<f64> {
        if outputs.shape() != targets.shape() {
            return Err(Error::dims(
                "loss targets",
                format!("{:?}", outputs.shape()),
                format!("{:?}", targets.shape()),
            ));
        }
        let total: f64 = outputs
            .iter()
            .zip(targets.iter())
            .map(|(z, y)| self.loss.sample_loss(*z, *y))
            .sum();
        Ok(total / outputs.nrows().max(1) as f64)
    }

    /// Backpropagation: batch-averaged gradients and the unaveraged per-sample
    /// `ā_{i-1}`, `g_i` of every layer.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        targets: &Matrix,
    ) -> Result<(GradientSet, LayerBatchStats)> {
        let out = pass.output();
        if out.shape() != targets.shape() {
            return Err(Error::dims(
                "backward targets",
                format!("{:?}", out.shape()),
                format!("{:?}", targets.shape()),
            ));
        }
        if pass.preactivations.len() != self.num_layers() {
            return Err(Error::dims(
                "forward pass depth",
                self.num_layers(),
                pass.preactivations.len(),
            ));
        }
        let m = out.nrows();
        if m == 0 {
            return Err(Error::EmptyBatch);
        }

        let last = self.num_layers() - 1;
        // Fused ∂L/∂s = z − y for sigmoid + cross entropy.
        let mut g = match (self.loss, self.activations[last]) {
            (LossKind::BinaryCrossEntropy, Activation::Sigmoid) => out - targets,
            _ => {
                let da = out - targets;
                self.chain(last, &da, pass)
            }
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss derivative".into()));
        }

        let mut grads = vec![Matrix::zeros(0, 0); self.num_layers()];
        let mut stats = Vec::with_capacity(self.num_layers());
        for i in (0..=last).rev() {
            let abar = augment(&pass.activations[i]);
            grads[i] = g.transpose() * &abar / m as f64;
            let next = if i > 0 {
                let w = &self.weights[i];
                let da = &g * w.columns(1, w.ncols() - 1);
                Some(self.chain(i - 1, &da, pass))
            } else {
                None
            };
            let gi = std::mem::replace(&mut g, next.unwrap_or_else(|| Matrix::zeros(0, 0)));
            stats.push(LayerStats::new(abar, gi)?);
        }
        stats.reverse();
        Ok((GradientSet(grads), LayerBatchStats::new(stats)?))
    }

    /// `g_i = Da_i ⊙ σ'_i(s_i)`.
    fn chain(&self, layer: usize, da: &Matrix, pass: &ForwardPass) -> Matrix {
        let s = &pass.preactivations[layer];
        let a = &pass.activations[layer + 1];
        let act = self.activations[layer];
        Matrix::from_fn(da.nrows(), da.ncols(), |r, c| {
            da[(r, c)] * act.derivative(s[(r, c)], a[(r, c)])
        })
    }

    /// Draws targets from the model's predictive distribution at outputs `z`.
    pub fn sample_targets(&self, z: &Matrix, rng: &mut impl Rng) -> Result<Matrix> {
        sample_targets(z, self.loss, rng)
    }
}

/// Bernoulli(z) draws for cross entropy, `z + N(0, 1)` for squared error.
pub fn sample_targets(z: &Matrix, loss: LossKind, rng: &mut impl Rng) -> Result<Matrix> {
    match loss {
        LossKind::BinaryCrossEntropy => {
            if let Some(bad) = z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!(
                    "Bernoulli mean {bad} outside [0, 1]"
                )));
            }
            Ok(z.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
        }
        LossKind::MeanSquaredError => {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Gaussian mean".into()));
            }
            Ok(z.map(|mu| {
                let n: f64 = StandardNormal.sample(rng);
                mu + n
            }))
        }
    }
}
