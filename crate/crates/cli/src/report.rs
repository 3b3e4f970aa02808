//! CSV and SVG artifacts.
//!
//! `metrics.csv` holds one row per iteration with the columns of
//! [`METRIC_HEADER`]. Every value is deterministic given the config, so two
//! runs with the same seed produce identical files; wall-clock time goes to a
//! separate `timing.csv`. Floats use Rust's shortest round-trip formatting,
//! missing values are written as `NaN`, and per-layer lists are joined with
//! `;`.

use std::io::Write;
use std::path::Path;

use kronfisher::kron_approx::Method;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-iteration record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricRecord {
    pub iteration: usize,
    /// 1-based epoch the iteration belongs to.
    pub epoch: usize,
    /// Mini-batch loss before the update.
    pub train_loss: f64,
    /// Full validation loss on the last iteration of an epoch, NaN otherwise.
    pub val_loss: f64,
    /// KL clip factor, NaN for first-order methods.
    pub nu: f64,
    pub refreshed: bool,
    pub fallbacks: usize,
    /// `(error1, error2)` per method in [`Method::ALL`] order; NaN when not probed.
    pub errors: [(f64, f64); 5],
    /// Per-layer dominant and second singular values and solver iterations
    /// on refresh iterations, empty otherwise.
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub svd_iterations: Vec<usize>,
}

impl MetricRecord {
    pub fn new(iteration: usize, epoch: usize) -> Self {
        Self {
            iteration,
            epoch,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            nu: f64::NAN,
            errors: [(f64::NAN, f64::NAN); 5],
            ..Default::default()
        }
    }

    pub fn error(&self, m: Method) -> (f64, f64) {
        self.errors[method_index(m)]
    }

    pub fn set_error(&mut self, m: Method, e: (f64, f64)) {
        self.errors[method_index(m)] = e;
    }

    /// Equality that treats NaNs in the same position as equal.
    pub fn same_as(&self, other: &Self) -> bool {
        self.to_row() == other.to_row()
    }

    fn to_row(&self) -> Vec<String> {
        let mut row = vec![
            self.iteration.to_string(),
            self.epoch.to_string(),
            fmt(self.train_loss),
            fmt(self.val_loss),
            fmt(self.nu),
            u8::from(self.refreshed).to_string(),
            self.fallbacks.to_string(),
        ];
        for (e1, e2) in self.errors {
            row.push(fmt(e1));
            row.push(fmt(e2));
        }
        row.push(join(self.sigma1.iter().map(|v| fmt(*v))));
        row.push(join(self.sigma2.iter().map(|v| fmt(*v))));
        row.push(join(self.svd_iterations.iter().map(|v| v.to_string())));
        row
    }

    fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != METRIC_HEADER.len() {
            return Err(Error::Config(format!("metrics row has {} fields, expected {}", row.len(), METRIC_HEADER.len())));
        }
        let f = |i: usize| parse::<f64>(&row[i]);
        let mut errors = [(0.0, 0.0); 5];
        for (k, e) in errors.iter_mut().enumerate() {
            *e = (f(7 + 2 * k)?, f(8 + 2 * k)?);
        }
        Ok(Self {
            iteration: parse(&row[0])?,
            epoch: parse(&row[1])?,
            train_loss: f(2)?,
            val_loss: f(3)?,
            nu: f(4)?,
            refreshed: parse::<u8>(&row[5])? != 0,
            fallbacks: parse(&row[6])?,
            errors,
            sigma1: split(&row[17])?,
            sigma2: split(&row[18])?,
            svd_iterations: split(&row[19])?,
        })
    }
}

fn method_index(m: Method) -> usize {
    Method::ALL.iter().position(|&x| x == m).expect("method listed in ALL")
}

pub const METRIC_HEADER: [&str; 20] = [
    "iteration",
    "epoch",
    "train_loss",
    "val_loss",
    "nu",
    "refreshed",
    "fallbacks",
    "error1_kfac",
    "error2_kfac",
    "error1_kpsvd",
    "error2_kpsvd",
    "error1_deflation",
    "error2_deflation",
    "error1_lanczos",
    "error2_lanczos",
    "error1_kfac_corrected",
    "error2_kfac_corrected",
    "sigma1",
    "sigma2",
    "svd_iterations",
];

/// Full-dataset losses at the end of each epoch; epoch 0 is the initial model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub wall_clock_seconds: f64,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(";")
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("unparsable CSV field `{s}`")))
}

fn split<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(parse).collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn emit_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRIC_HEADER)?;
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRIC_HEADER) {
        return Err(Error::Config(format!("{}: unexpected metrics header", path.display())));
    }
    r.records().map(|row| MetricRecord::from_row(&row?)).collect()
}

/// Writes any serializable records with a header taken from their field names.
pub fn emit_records<T: Serialize>(records: &[T], header: &[&str], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const EPOCH_HEADER: [&str; 4] = ["epoch", "iteration", "train_loss", "val_loss"];
pub const TIMING_HEADER: [&str; 2] = ["iteration", "wall_clock_seconds"];

/// One line of a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG line chart, one `<polyline>` per series. Non-finite
/// points are dropped.
pub fn emit_plot(series: &[Series], title: &str, x_label: &str, y_label: &str, path: &Path) -> Result<()> {
    let (w, h, margin) = (640.0, 400.0, 60.0);
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut out = String::new();
    out.push_str(&format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        w / 2.0,
        escape(title)
    ));
    out.push_str(&format!(
        "<path d=\"M{m} {m} V{b} H{r}\" fill=\"none\" stroke=\"black\"/>\n",
        m = margin,
        b = h - margin,
        r = w - margin
    ));
    for (v, anchor, x, y) in [
        (y1, "end", margin - 6.0, margin + 4.0),
        (y0, "end", margin - 6.0, h - margin + 4.0),
        (x0, "middle", margin, h - margin + 18.0),
        (x1, "middle", w - margin, h - margin + 18.0),
    ] {
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\">{v:.4}</text>\n"
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        w / 2.0,
        h - 16.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        h / 2.0,
        h / 2.0,
        escape(y_label)
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"><title>{}</title></polyline>\n",
            pts.join(" "),
            escape(&s.label)
        ));
        let ly = margin + 16.0 * i as f64;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - margin - 120.0,
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(out.as_bytes()).map_err(Error::io(path))
}
