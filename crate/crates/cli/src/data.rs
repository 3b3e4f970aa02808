//! Datasets: synthetic curves and blobs, and the IDX format used by MNIST.

use std::path::Path;

use kronfisher::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Stroke half-width in pixels.
const STROKE: f64 = 0.6;

/// `n` random cubic Bézier curves, antialiased onto `side x side` grids,
/// one row-major image per row with values in `[0, 1]`.
pub fn gen_synthetic_curves(n: usize, side: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = 8 * side.max(2);
    let mut out = Matrix::zeros(n, side * side);
    let lo = 0.1 * side as f64;
    let hi = 0.9 * side as f64;
    for img in 0..n {
        let ctrl: [(f64, f64); 4] = std::array::from_fn(|_| (rng.random_range(lo..hi), rng.random_range(lo..hi)));
        let points: Vec<(f64, f64)> = (0..=samples).map(|i| bezier(&ctrl, i as f64 / samples as f64)).collect();
        for y in 0..side {
            for x in 0..side {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let dist = points
                    .windows(2)
                    .map(|s| segment_distance(p, s[0], s[1]))
                    .fold(f64::INFINITY, f64::min);
                out[(img, y * side + x)] = (STROKE + 0.5 - dist).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn bezier(c: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let x = w.iter().zip(c).map(|(w, p)| w * p.0).sum();
    let y = w.iter().zip(c).map(|(w, p)| w * p.1).sum();
    (x, y)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Sums of one to three isotropic Gaussian bumps, clipped to `[0, 1]`.
/// Stand-in data for the face-image architecture.
pub fn gen_gaussian_blobs(n: usize, side: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let mut out = Matrix::zeros(n, side * side);
    for img in 0..n {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                (
                    rng.random_range(0.0..s),
                    rng.random_range(0.0..s),
                    rng.random_range(s / 10.0..s / 4.0),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        for y in 0..side {
            for x in 0..side {
                let v: f64 = blobs
                    .iter()
                    .map(|&(cx, cy, w, a)| {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        a * (-d2 / (2.0 * w * w)).exp()
                    })
                    .sum();
                out[(img, y * side + x)] = v.min(1.0);
            }
        }
    }
    out
}

/// A parsed IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX byte buffer. Only the unsigned-byte element type is accepted.
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Idx(format!("truncated header ({} bytes)", bytes.len())))
    };
    let magic = word(0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(Error::Idx(format!("bad magic number {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(Error::Idx("zero-dimensional data".into()));
    }
    let dims = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx(format!("dimensions {dims:?} overflow")))?;
    let start = 4 * (ndim + 1);
    let body = &bytes[start..];
    if body.len() < len {
        return Err(Error::Idx(format!("truncated data: expected {len} bytes, found {}", body.len())));
    }
    Ok(Idx {
        dims,
        data: body[..len].to_vec(),
    })
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (idx.dims.len() + 1) + idx.data.len());
    out.extend_from_slice(&(0x0800 | idx.dims.len() as u32).to_be_bytes());
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::io(path))
}

/// Images as rows scaled by `1/255`.
pub fn load_idx_images(path: &Path) -> Result<Matrix> {
    idx_to_images(&parse_idx(&read(path)?)?)
}

pub fn idx_to_images(idx: &Idx) -> Result<Matrix> {
    if idx.dims.len() != 3 {
        return Err(Error::Idx(format!(
            "image files have magic {IDX_IMAGES:#010x}; got {} dimensions",
            idx.dims.len()
        )));
    }
    let (n, pixels) = (idx.dims[0], idx.dims[1] * idx.dims[2]);
    Ok(Matrix::from_fn(n, pixels, |r, c| idx.data[r * pixels + c] as f64 / 255.0))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let idx = parse_idx(&read(path)?)?;
    if idx.dims.len() != 1 {
        return Err(Error::Idx(format!(
            "label files have magic {IDX_LABELS:#010x}; got {} dimensions",
            idx.dims.len()
        )));
    }
    Ok(idx.data)
}

/// Quantises `[0, 1]` images to bytes and writes them as an IDX image file.
pub fn write_idx_images(path: &Path, images: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != images.ncols() {
        return Err(Error::Idx(format!("{rows}x{cols} images do not have {} pixels", images.ncols())));
    }
    let mut data = Vec::with_capacity(images.len());
    for r in 0..images.nrows() {
        data.extend(images.row(r).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let idx = Idx {
        dims: vec![images.nrows(), rows, cols],
        data,
    };
    std::fs::write(path, encode_idx(&idx)).map_err(Error::io(path))
}

/// Train and validation images, one sample per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Matrix,
    pub val: Matrix,
}
