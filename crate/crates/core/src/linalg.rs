//! Dense linear algebra and Kronecker-structure primitives.
//!
//! Matrices are `nalgebra` column-major matrices, so [`vec`] is a plain copy of
//! the storage and [`mat`] its inverse. Eigen and singular value
//! decompositions delegate to `nalgebra` and are re-sorted in descending order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigenvalues with magnitude below this fraction of the largest are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Kronecker product: block `(mu, nu)` of the result is `a[(mu, nu)] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = b.shape();
    let mut out = Matrix::zeros(a.nrows() * p, a.ncols() * q);
    for nu in 0..a.ncols() {
        for mu in 0..a.nrows() {
            let s = a[(mu, nu)];
            if s == 0.0 {
                continue;
            }
            let mut block = out.view_mut((mu * p, nu * q), (p, q));
            block.zip_apply(b, |o, bv| *o = s * bv);
        }
    }
    out
}

/// Stacks the columns of `m` into a vector.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: reshapes a vector of length `rows * cols` column by column.
pub fn mat(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::dims("mat", rows * cols, v.len()));
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Reshapes a vector of length `n^2` into an `n x n` matrix.
pub fn mat_square(v: &Vector) -> Result<Matrix> {
    let n = exact_sqrt(v.len())
        .ok_or_else(|| Error::dims("mat_square", "a perfect square", v.len()))?;
    mat(v, n, n)
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Zigzag rearrangement of a `d*d' x d*d'` uniform block matrix.
///
/// Row `nu * d + mu` of the `d^2 x d'^2` output is `vec(M_{mu,nu})^T`, so the
/// block grid is traversed column by column and `kron(R, S)` maps to
/// `vec(R) vec(S)^T`.
pub fn zigzag(m: &Matrix, d: usize, d_prime: usize) -> Result<Matrix> {
    let n = d * d_prime;
    if m.nrows() != n || m.ncols() != n || d == 0 || d_prime == 0 {
        return Err(Error::NotDivisible {
            rows: m.nrows(),
            cols: m.ncols(),
            blocks: d,
            block_size: d_prime,
        });
    }
    let mut out = Matrix::zeros(d * d, d_prime * d_prime);
    for nu in 0..d {
        for mu in 0..d {
            let row = nu * d + mu;
            let block = m.view((mu * d_prime, nu * d_prime), (d_prime, d_prime));
            for (k, value) in block.iter().enumerate() {
                out[(row, k)] = *value;
            }
        }
    }
    Ok(out)
}

/// Computes `(A ⊗ B) vec(X)` as `B X A^T`, returned in matrix form.
pub fn kron_apply(a: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.nrows() != b.ncols() || x.ncols() != a.ncols() {
        return Err(Error::dims(
            "kron_apply",
            format!("{}x{}", b.ncols(), a.ncols()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(b * x * a.transpose())
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `V diag(f(lambda)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut scaled = self.eigenvectors.clone();
        for (j, lambda) in self.eigenvalues.iter().enumerate() {
            let s = f(*lambda);
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.eigenvectors.transpose()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map(|l| l)
    }
}

fn ensure_square(m: &Matrix, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(
            context,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn ensure_finite(m: &Matrix, context: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    ensure_square(m, "sym_eig")?;
    ensure_finite(m, "sym_eig input")?;
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// `M^{-1/2}` for symmetric positive definite `M`.
pub fn inv_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs()));
    let clamp = |l: f64| {
        if l.abs() < EIGEN_CLAMP * scale {
            0.0
        } else {
            l
        }
    };
    let smallest = eig
        .eigenvalues
        .iter()
        .copied()
        .map(clamp)
        .fold(f64::INFINITY, f64::min);
    if !(smallest > 0.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: if eig.eigenvalues.is_empty() {
                0.0
            } else {
                smallest
            },
        });
    }
    Ok(eig.map(|l| 1.0 / clamp(l).sqrt()))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.norm()
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn spectrum(m: &Matrix) -> Result<Vector> {
    Ok(sym_eig(m)?.eigenvalues)
}

/// Thin SVD `M = U diag(sigma) V^T` with `sigma` descending.
#[derive(Debug, Clone)]
pub struct DenseSvd {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

impl DenseSvd {
    /// Best rank-`k` approximation.
    pub fn truncate(&self, k: usize) -> Matrix {
        let k = k.min(self.sigma.len());
        let mut out = Matrix::zeros(self.u.nrows(), self.v.nrows());
        for i in 0..k {
            out += self.sigma[i] * self.u.column(i) * self.v.column(i).transpose();
        }
        out
    }
}

pub fn svd_dense(m: &Matrix) -> Result<DenseSvd> {
    ensure_finite(m, "svd_dense input")?;
    let svd = m.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NonFinite("svd_dense did not converge".into())),
    };
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma = Vector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
    let mut u_sorted = Matrix::zeros(u.nrows(), k);
    let mut v_sorted = Matrix::zeros(v_t.ncols(), k);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v_t.row(src).transpose());
    }
    Ok(DenseSvd {
        u: u_sorted,
        sigma,
        v: v_sorted,
    })
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `‖M - M^T‖_F / ‖M‖_F`, zero for the zero matrix.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.norm();
    if n == 0.0 {
        0.0
    } else {
        (m - m.transpose()).norm() / n
    }
}

pub fn trace(m: &Matrix) -> f64 {
    m.diagonal().sum()
}

/// Solves `M X = B` for symmetric positive definite `M` via Cholesky.
pub fn spd_solve(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            min_eigenvalue: spectrum(m)
                .ok()
                .and_then(|s| s.iter().copied().reduce(f64::min))
                .unwrap_or(f64::NAN),
        })?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    ensure_square(m, "spd_inverse")?;
    let inv = spd_solve(m, &Matrix::identity(m.nrows(), m.ncols()))?;
    Ok(symmetrize(&inv))
}
