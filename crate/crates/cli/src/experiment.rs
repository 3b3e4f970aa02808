//! Training runs and Fisher-approximation probes.

use std::path::Path;
use std::time::Instant;

use kronfisher::kron_approx::{Method, SvdOptions};
use kronfisher::optim::fim_error_probe;
use kronfisher::{Matrix, Mlp, Optimizer, OptimizerConfig, OptimizerKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProbeConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::report::{
    emit_csv, emit_plot, emit_records, EpochRecord, MetricRecord, Series, TimingRecord, EPOCH_HEADER, TIMING_HEADER,
};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: OptimizerKind,
    pub iterations: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    /// The run stopped early on a non-finite loss.
    pub diverged: bool,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub timings: Vec<TimingRecord>,
    pub epochs: Vec<EpochRecord>,
    pub summary: Summary,
}

pub fn init_model(config: &ExperimentConfig) -> Result<Mlp> {
    let arch = &config.architecture;
    let mut rng = ChaCha8Rng::seed_from_u64(config.optimizer.seed);
    Ok(Mlp::init(arch.layers.clone(), arch.activations.clone(), arch.loss, &mut rng)?)
}

/// Mean loss of the autoencoder over a whole data matrix, in chunks.
pub fn dataset_loss(model: &Mlp, x: &Matrix) -> Result<f64> {
    if x.nrows() == 0 {
        return Ok(f64::NAN);
    }
    let chunk = 1024;
    let mut total = 0.0;
    for start in (0..x.nrows()).step_by(chunk) {
        let rows = x.rows(start, chunk.min(x.nrows() - start)).into_owned();
        let out = model.forward(&rows)?;
        total += model.loss(out.output(), &rows)? * rows.nrows() as f64;
    }
    Ok(total / x.nrows() as f64)
}

fn select_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

/// Shuffled mini-batches of one epoch; the last one may be short.
fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn probe_errors(
    model: &Mlp,
    x: &Matrix,
    probe: &ProbeConfig,
    opts: &SvdOptions,
    rng: &mut ChaCha8Rng,
    record: &mut MetricRecord,
) -> Result<()> {
    for r in fim_error_probe(model, x, probe.layer - 1, &probe.methods, opts, rng)? {
        record.set_error(r.method, (r.error1, r.error2));
    }
    Ok(())
}

/// Trains the configured model for `config.epochs` epochs.
pub fn run(config: &ExperimentConfig, data: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    let mut model = init_model(config)?;
    let mut opt = Optimizer::new(config.optimizer.clone(), &model)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.optimizer.seed ^ SHUFFLE_STREAM);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.optimizer.seed ^ PROBE_STREAM);
    let probe = config.probe.as_ref().filter(|p| p.during_training);
    let start = Instant::now();

    let initial = dataset_loss(&model, &data.train)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        iteration: 0,
        train_loss: initial,
        val_loss: dataset_loss(&model, &data.val)?,
    }];
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 1..=config.epochs {
        for idx in batches(data.train.nrows(), config.optimizer.batch_size, &mut shuffle) {
            let x = select_rows(&data.train, &idx);
            let k = opt.iteration();
            let mut record = MetricRecord::new(k, epoch);
            if let Some(p) = probe.filter(|p| k % p.every == 0) {
                probe_errors(&model, &x, p, &config.optimizer.svd, &mut probe_rng, &mut record)?;
            }
            let report = match opt.step(&mut model, &x, &x) {
                Ok(r) => r,
                Err(kronfisher::Error::NonFinite(msg)) => {
                    log::warn!("{} diverged: {msg}", config.optimizer.method.name());
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            record.train_loss = report.loss;
            record.nu = report.nu;
            record.refreshed = report.refreshed;
            record.fallbacks = report.fallbacks;
            record.sigma1 = report.diagnostics.iter().map(|d| d.sigma1).collect();
            record.sigma2 = report.diagnostics.iter().map(|d| d.sigma2).collect();
            record.svd_iterations = report.diagnostics.iter().map(|d| d.iterations).collect();
            records.push(record);
            timings.push(TimingRecord {
                iteration: k,
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            });
        }
        let train_loss = dataset_loss(&model, &data.train)?;
        let val_loss = dataset_loss(&model, &data.val)?;
        if let Some(last) = records.last_mut() {
            last.val_loss = val_loss;
        }
        log::info!(
            "{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}",
            config.optimizer.method.name()
        );
        epochs.push(EpochRecord {
            epoch,
            iteration: opt.iteration(),
            train_loss,
            val_loss,
        });
        if !train_loss.is_finite() {
            diverged = true;
            break;
        }
    }

    let last = epochs.last().copied().expect("initial epoch record");
    let summary = Summary {
        method: config.optimizer.method,
        iterations: opt.iteration(),
        initial_train_loss: initial,
        final_train_loss: if diverged { f64::INFINITY } else { last.train_loss },
        final_val_loss: if diverged { f64::INFINITY } else { last.val_loss },
        diverged,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        records,
        timings,
        epochs,
        summary,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(Error::io(path))
}

/// Writes `config.json`, `metrics.csv`, `epochs.csv`, `timing.csv`,
/// `summary.json` and `loss.svg` into `dir`.
pub fn write_outputs(config: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_json(config, &dir.join("config.json"))?;
    emit_csv(&out.records, &dir.join("metrics.csv"))?;
    emit_records(&out.epochs, &EPOCH_HEADER, &dir.join("epochs.csv"))?;
    emit_records(&out.timings, &TIMING_HEADER, &dir.join("timing.csv"))?;
    write_json(&out.summary, &dir.join("summary.json"))?;
    let series = [
        Series {
            label: "train".into(),
            points: out.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
        },
        Series {
            label: "validation".into(),
            points: out.epochs.iter().map(|e| (e.epoch as f64, e.val_loss)).collect(),
        },
    ];
    emit_plot(
        &series,
        &format!("{} loss", config.optimizer.method.name()),
        "epoch",
        "loss",
        &dir.join("loss.svg"),
    )
}

/// Loads data, trains, and writes every artifact to `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let data = config.load_dataset()?;
    let out = run(config, &data)?;
    write_outputs(config, &out, &config.out_dir)?;
    Ok(out)
}

/// Fisher approximation errors at every probe of an Adam run.
#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub records: Vec<MetricRecord>,
    /// Probes at which an ordering that should hold by construction failed.
    pub violations: Vec<String>,
    /// Probes where Lanczos beat Deflation in Frobenius error.
    pub lanczos_wins: usize,
    /// Probes where a rank-2 or KPSVD spectrum error exceeded KFAC's.
    pub spectral_inversions: usize,
}

/// Slack allowed in the provable error orderings.
pub const ORDERING_SLACK: f64 = 1e-9;

/// Orderings that follow from optimality: KPSVD ≤ KFAC, Deflation ≤ KPSVD,
/// KFAC-corrected ≤ KFAC, all in Frobenius error.
pub fn ordering_violations(r: &MetricRecord) -> Vec<String> {
    let e = |m: Method| r.error(m).0;
    let checks = [
        (Method::Kpsvd, Method::Kfac),
        (Method::Deflation, Method::Kpsvd),
        (Method::KfacCorrected, Method::Kfac),
    ];
    checks
        .iter()
        .filter(|(lo, hi)| !(e(*lo) <= e(*hi) + ORDERING_SLACK))
        .map(|(lo, hi)| {
            format!(
                "iteration {}: error1 {} = {} > {} = {}",
                r.iteration,
                lo.name(),
                e(*lo),
                hi.name(),
                e(*hi)
            )
        })
        .collect()
}

pub fn run_probe(config: &ExperimentConfig, data: &Dataset) -> Result<ProbeOutput> {
    config.validate()?;
    let probe = config.probe.clone().unwrap_or_default();
    let mut model = init_model(config)?;
    let adam = OptimizerConfig {
        method: OptimizerKind::Adam,
        learning_rate: probe.learning_rate,
        ..config.optimizer.clone()
    };
    let mut opt = Optimizer::new(adam, &model)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.optimizer.seed ^ SHUFFLE_STREAM);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.optimizer.seed ^ PROBE_STREAM);
    let mut records = Vec::new();
    let mut epoch = 0;
    let mut queue = Vec::new().into_iter();
    for k in 0..probe.iterations {
        let idx = match queue.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = batches(data.train.nrows(), config.optimizer.batch_size, &mut shuffle).into_iter();
                queue.next().expect("non-empty training set")
            }
        };
        let x = select_rows(&data.train, &idx);
        let mut record = MetricRecord::new(k, epoch);
        if k % probe.every == 0 {
            probe_errors(&model, &x, &probe, &config.optimizer.svd, &mut probe_rng, &mut record)?;
        }
        record.train_loss = opt.step(&mut model, &x, &x)?.loss;
        records.push(record);
    }

    let probed: Vec<&MetricRecord> = records.iter().filter(|r| !r.error(probe.methods[0]).0.is_nan()).collect();
    let has = |m: Method| probe.methods.contains(&m);
    let mut violations = Vec::new();
    let mut lanczos_wins = 0;
    let mut spectral_inversions = 0;
    for r in &probed {
        if Method::ALL.iter().all(|&m| has(m)) {
            violations.extend(ordering_violations(r));
        }
        if r.error(Method::Lanczos).0 < r.error(Method::Deflation).0 {
            lanczos_wins += 1;
        }
        let kfac2 = r.error(Method::Kfac).1;
        if [Method::Kpsvd, Method::Deflation, Method::Lanczos, Method::KfacCorrected]
            .iter()
            .any(|&m| r.error(m).1 > kfac2)
        {
            spectral_inversions += 1;
        }
    }
    log::info!(
        "{} probes: {} ordering violations, Lanczos beat Deflation {} times, {} spectral-error inversions against KFAC",
        probed.len(),
        violations.len(),
        lanczos_wins,
        spectral_inversions
    );
    Ok(ProbeOutput {
        records,
        violations,
        lanczos_wins,
        spectral_inversions,
    })
}

/// Writes `probe.csv` (the metrics layout with error columns filled) and `probe.svg`.
pub fn write_probe(out: &ProbeOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    emit_csv(&out.records, &dir.join("probe.csv"))?;
    let series: Vec<Series> = Method::ALL
        .iter()
        .map(|&m| Series {
            label: m.name().into(),
            points: out
                .records
                .iter()
                .map(|r| (r.iteration as f64, r.error(m).0))
                .collect(),
        })
        .collect();
    emit_plot(&series, "Fisher block error", "iteration", "relative Frobenius error", &dir.join("probe.svg"))
}
