//! Experiment configuration.
//!
//! Configs are JSON documents carrying `schema_version`. Values are resolved
//! in three layers, later ones winning: the built-in preset named by
//! `preset`, the config file, then command-line flags.

use std::path::{Path, PathBuf};

use kronfisher::kron_approx::Method;
use kronfisher::mlp::{Activation, LossKind};
use kronfisher::{OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_blobs, gen_synthetic_curves, load_idx_images, Dataset};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Shrunken curves autoencoder on 8x8 synthetic curves.
    Desk,
    Curves,
    Mnist,
    Faces,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown preset `{s}` (desk, curves, mnist, faces)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticCurves,
    Mnist,
    /// The face images are not redistributable; only Gaussian blobs can stand in.
    FacesConfigOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    /// Image side length for generated data.
    pub side: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_images: Option<PathBuf>,
    /// Use generated stand-in data for `faces_config_only`.
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: Vec<usize>,
    pub activations: Vec<Activation>,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// 1-based layer index.
    pub layer: usize,
    pub every: usize,
    /// Length of the Adam run the probes are taken from.
    pub iterations: usize,
    pub learning_rate: f64,
    pub methods: Vec<Method>,
    /// Also probe every `every` iterations of natural gradient `train` runs.
    pub during_training: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            layer: 1,
            every: 1,
            iterations: 200,
            learning_rate: 1e-3,
            methods: Method::ALL.to_vec(),
            during_training: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub methods: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    /// Only used by natural gradient methods.
    pub dampings: Vec<f64>,
    pub clips: Vec<f64>,
}

/// The learning rate and damping grid `{1, 3} x 10^{-1..-4}`.
pub const DEFAULT_GRID: [f64; 8] = [1e-1, 1e-2, 1e-3, 1e-4, 3e-1, 3e-2, 3e-3, 3e-4];

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: OptimizerKind::ALL.to_vec(),
            learning_rates: DEFAULT_GRID.to_vec(),
            dampings: DEFAULT_GRID.to_vec(),
            clips: vec![1e-2, 1e-3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    pub out_dir: PathBuf,
}

fn autoencoder(widths: &[usize], hidden: Activation, output: Activation, loss: LossKind) -> Architecture {
    let n = widths.len() - 1;
    let mut activations = vec![hidden; n - 1];
    activations.push(output);
    Architecture {
        layers: widths.to_vec(),
        activations,
        loss,
    }
}

impl Preset {
    pub fn architecture(self) -> Architecture {
        let (relu, sig, lin) = (Activation::Relu, Activation::Sigmoid, Activation::Linear);
        let bce = LossKind::BinaryCrossEntropy;
        match self {
            Preset::Desk => autoencoder(&[64, 32, 16, 6, 16, 32, 64], relu, sig, bce),
            Preset::Curves => autoencoder(&[784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784], relu, sig, bce),
            Preset::Mnist => autoencoder(&[784, 1000, 500, 250, 30, 250, 500, 1000, 784], relu, sig, bce),
            Preset::Faces => autoencoder(
                &[625, 2000, 1000, 500, 30, 500, 1000, 2000, 625],
                relu,
                lin,
                LossKind::MeanSquaredError,
            ),
        }
    }

    /// 1-based layer probed by default: the middle layer at desk scale,
    /// layer 5 otherwise.
    pub fn probe_layer(self) -> usize {
        match self {
            Preset::Desk => 3,
            _ => 5,
        }
    }

    pub fn config(self) -> ExperimentConfig {
        let (kind, n_train, n_val, side, batch, period) = match self {
            Preset::Desk => (DatasetKind::SyntheticCurves, 1024, 256, 8, 64, 10),
            Preset::Curves => (DatasetKind::SyntheticCurves, 20_000, 10_000, 28, 256, 100),
            Preset::Mnist => (DatasetKind::Mnist, 60_000, 10_000, 28, 512, 100),
            Preset::Faces => (DatasetKind::FacesConfigOnly, 103_500, 62_100, 25, 1024, 100),
        };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            preset: Some(self),
            dataset: DatasetConfig {
                kind,
                n_train,
                n_val,
                side,
                seed: 1,
                train_images: None,
                val_images: None,
                synthetic: false,
            },
            architecture: self.architecture(),
            optimizer: OptimizerConfig {
                batch_size: batch,
                refresh_period: period,
                inverse_period: period,
                ..OptimizerConfig::default()
            },
            epochs: 20,
            probe: Some(ProbeConfig {
                layer: self.probe_layer(),
                ..ProbeConfig::default()
            }),
            grid: Some(GridConfig::default()),
            out_dir: PathBuf::from("runs").join(format!("{self:?}").to_ascii_lowercase()),
        }
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub damping: Option<f64>,
    pub clip: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub probe_layer: Option<usize>,
}

impl ExperimentConfig {
    /// Reads a config file. Fields missing from the file are taken from its
    /// `preset`, if one is named.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Config(format!(
                "expected schema_version {SCHEMA_VERSION}, found {}",
                version.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        if let Some(preset) = value.get("preset").and_then(|p| p.as_str()) {
            let base = serde_json::to_value(preset.parse::<Preset>()?.config())?;
            value = merge(base, value);
        }
        let config: ExperimentConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let opt = &mut self.optimizer;
        if let Some(m) = o.method {
            opt.method = m;
        }
        if let Some(v) = o.learning_rate {
            opt.learning_rate = v;
        }
        if let Some(v) = o.damping {
            opt.damping = v;
        }
        if let Some(v) = o.clip {
            opt.clip = v;
        }
        if let Some(v) = o.seed {
            opt.seed = v;
        }
        if let Some(v) = o.batch_size {
            opt.batch_size = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if o.synthetic {
            self.dataset.synthetic = true;
        }
        if let Some(layer) = o.probe_layer {
            self.probe.get_or_insert_with(ProbeConfig::default).layer = layer;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let arch = &self.architecture;
        if let Some(p) = self.preset {
            if *arch != p.architecture() {
                return bad(format!("architecture does not match the `{p:?}` preset"));
            }
        }
        kronfisher::Mlp::new(arch.layers.clone(), arch.activations.clone(), arch.loss)?;
        self.optimizer.validate()?;
        let d = &self.dataset;
        if d.n_train == 0 {
            return bad("dataset needs at least one training sample".into());
        }
        let input = arch.layers[0];
        if arch.layers.last() != Some(&input) {
            return bad("autoencoder output width must equal its input width".into());
        }
        match d.kind {
            DatasetKind::SyntheticCurves if d.side * d.side != input => {
                return bad(format!("{}x{} images do not fit a {input}-wide input", d.side, d.side));
            }
            DatasetKind::FacesConfigOnly if d.side * d.side != input => {
                return bad(format!("{}x{} images do not fit a {input}-wide input", d.side, d.side));
            }
            DatasetKind::Mnist if d.train_images.is_none() => {
                return bad("the mnist dataset needs `train_images` (an IDX file)".into());
            }
            _ => {}
        }
        if let Some(p) = &self.probe {
            if p.layer == 0 || p.layer > arch.layers.len() - 1 {
                return bad(format!("probe layer {} outside 1..={}", p.layer, arch.layers.len() - 1));
            }
            if p.every == 0 {
                return bad("probe interval must be at least 1".into());
            }
        }
        Ok(())
    }

    /// Materialises the configured dataset.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::SyntheticCurves => Ok(Dataset {
                train: gen_synthetic_curves(d.n_train, d.side, d.seed),
                val: gen_synthetic_curves(d.n_val, d.side, d.seed.wrapping_add(1)),
            }),
            DatasetKind::FacesConfigOnly if d.synthetic => Ok(Dataset {
                train: gen_gaussian_blobs(d.n_train, d.side, d.seed),
                val: gen_gaussian_blobs(d.n_val, d.side, d.seed.wrapping_add(1)),
            }),
            DatasetKind::FacesConfigOnly => Err(Error::Config(
                "face images are not distributed; pass --synthetic to train on Gaussian blobs".into(),
            )),
            DatasetKind::Mnist => {
                let train = load_idx_images(d.train_images.as_deref().expect("validated"))?;
                let val = match &d.val_images {
                    Some(p) => load_idx_images(p)?,
                    None => kronfisher::Matrix::zeros(0, train.ncols()),
                };
                let cap = |m: kronfisher::Matrix, n: usize| {
                    let n = n.min(m.nrows());
                    m.rows(0, n).into_owned()
                };
                Ok(Dataset {
                    train: cap(train, d.n_train),
                    val: cap(val, d.n_val),
                })
            }
        }
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: serde_json::Value, top: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match (base, top) {
        (Value::Object(mut b), Value::Object(t)) => {
            for (k, v) in t {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, top) => top,
    }
}
