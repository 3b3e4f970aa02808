use std::sync::atomic::{AtomicUsize, Ordering};

use crate::fisher::{zf_matvec, zf_rmatvec, LayerStats};
use crate::linalg::{vec, Matrix, Vector};

use super::KronPair;

/// A linear map known only through products with it and its transpose.
///
/// For Fisher blocks this is the zigzag rearrangement `Z(F)`, a
/// `d^2 x d'^2` matrix; `matvec` maps `R^{d'^2} -> R^{d^2}`.
pub trait RearrangedOp: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn matvec(&self, v: &Vector) -> Vector;
    fn rmatvec(&self, u: &Vector) -> Vector;

    /// Materialises the operator column by column. Test oracles only.
    fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.nrows(), self.ncols());
        let mut e = Vector::zeros(self.ncols());
        for j in 0..self.ncols() {
            e[j] = 1.0;
            out.set_column(j, &self.matvec(&e));
            e[j] = 0.0;
        }
        out
    }
}

/// `Z(F)` for the Fisher block implied by one layer's statistics.
#[derive(Debug, Clone, Copy)]
pub struct FisherOp<'a> {
    stats: &'a LayerStats,
}

impl<'a> FisherOp<'a> {
    pub fn new(stats: &'a LayerStats) -> Self {
        Self { stats }
    }
}

impl RearrangedOp for FisherOp<'_> {
    fn nrows(&self) -> usize {
        self.stats.activation_dim().pow(2)
    }

    fn ncols(&self) -> usize {
        self.stats.derivative_dim().pow(2)
    }

    fn matvec(&self, v: &Vector) -> Vector {
        zf_matvec(self.stats, v).expect("operator dimensions are checked by the caller")
    }

    fn rmatvec(&self, u: &Vector) -> Vector {
        zf_rmatvec(self.stats, u).expect("operator dimensions are checked by the caller")
    }
}

/// An explicit matrix viewed as an operator.
#[derive(Debug, Clone)]
pub struct DenseOp(pub Matrix);

impl RearrangedOp for DenseOp {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }

    fn ncols(&self) -> usize {
        self.0.ncols()
    }

    fn matvec(&self, v: &Vector) -> Vector {
        &self.0 * v
    }

    fn rmatvec(&self, u: &Vector) -> Vector {
        self.0.tr_mul(u)
    }
}

/// `Z(F − R ⊗ S)` given `Z(F)`, using `Z(R ⊗ S) v = <vec(S), v> vec(R)`.
pub struct ResidualOp<'a> {
    base: &'a dyn RearrangedOp,
    left: Vector,
    right: Vector,
}

impl<'a> ResidualOp<'a> {
    pub fn new(base: &'a dyn RearrangedOp, pair: &KronPair) -> Self {
        Self {
            base,
            left: vec(&pair.left),
            right: vec(&pair.right),
        }
    }
}

pub fn residual_op<'a>(base: &'a dyn RearrangedOp, pair: &KronPair) -> ResidualOp<'a> {
    ResidualOp::new(base, pair)
}

impl RearrangedOp for ResidualOp<'_> {
    fn nrows(&self) -> usize {
        self.base.nrows()
    }

    fn ncols(&self) -> usize {
        self.base.ncols()
    }

    fn matvec(&self, v: &Vector) -> Vector {
        let mut out = self.base.matvec(v);
        out.axpy(-self.right.dot(v), &self.left, 1.0);
        out
    }

    fn rmatvec(&self, u: &Vector) -> Vector {
        let mut out = self.base.rmatvec(u);
        out.axpy(-self.left.dot(u), &self.right, 1.0);
        out
    }
}

/// Counts products and dense materialisations of the wrapped operator.
pub struct CountingOp<O> {
    inner: O,
    matvecs: AtomicUsize,
    rmatvecs: AtomicUsize,
    dense: AtomicUsize,
}

impl<O: RearrangedOp> CountingOp<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            matvecs: AtomicUsize::new(0),
            rmatvecs: AtomicUsize::new(0),
            dense: AtomicUsize::new(0),
        }
    }

    pub fn matvecs(&self) -> usize {
        self.matvecs.load(Ordering::Relaxed)
    }

    pub fn rmatvecs(&self) -> usize {
        self.rmatvecs.load(Ordering::Relaxed)
    }

    pub fn dense_materializations(&self) -> usize {
        self.dense.load(Ordering::Relaxed)
    }
}

impl<O: RearrangedOp> RearrangedOp for CountingOp<O> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    fn ncols(&self) -> usize {
        self.inner.ncols()
    }

    fn matvec(&self, v: &Vector) -> Vector {
        self.matvecs.fetch_add(1, Ordering::Relaxed);
        self.inner.matvec(v)
    }

    fn rmatvec(&self, u: &Vector) -> Vector {
        self.rmatvecs.fetch_add(1, Ordering::Relaxed);
        self.inner.rmatvec(u)
    }

    fn to_dense(&self) -> Matrix {
        self.dense.fetch_add(1, Ordering::Relaxed);
        self.inner.to_dense()
    }
}
