//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Cholesky factorization of a symmetric positive-definite matrix with a
/// conditioning check.
#[derive(Debug, Clone)]
pub struct SpdFactor<T: Scalar> {
    l: DMatrix<T>,
    logdet: T,
}

impl<T: Scalar> SpdFactor<T> {
    pub fn new(m: &DMatrix<T>, what: &str) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Ok(Self {
                l: DMatrix::zeros(0, 0),
                logdet: T::zero(),
            });
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
        let l = chol.l();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let mut logdet = T::zero();
        for i in 0..n {
            let d = l[(i, i)];
            let v = d.value();
            lo = lo.min(v);
            hi = hi.max(v);
            logdet += d.ln();
        }
        // (min/max of the Cholesky diagonal)^2 bounds the reciprocal condition number from above
        let rcond = (lo / hi).powi(2);
        if !rcond.is_finite() || rcond < RCOND_MIN {
            return Err(Error::Singular(format!(
                "{what} has reciprocal condition estimate {rcond:.3e}"
            )));
        }
        Ok(Self {
            l,
            logdet: logdet * T::lit(2.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    pub fn lower(&self) -> &DMatrix<T> {
        &self.l
    }

    /// `L⁻¹ b`.
    pub fn whiten(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.l[(i, j)] * x[j];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = self.whiten(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.l[(j, i)] * x[j];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad(&self, b: &[T]) -> T {
        self.whiten(b).iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn solve_mat(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<T> = b.column(c).iter().copied().collect();
            let x = self.solve(&col);
            for (r, v) in x.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<T> {
        let n = self.dim();
        let mut inv = self.solve_mat(&DMatrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    /// Gaussian log-density of a residual vector under this covariance.
    pub fn log_density(&self, resid: &[T]) -> T {
        let k = T::lit(self.dim() as f64);
        -(k * T::lit(LN_2PI) + self.logdet + self.quad(resid)) * T::lit(0.5)
    }
}

/// Inverse of a general square matrix, rejecting condition numbers above `1/RCOND_MIN`.
pub fn inverse_checked<T: Scalar>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is not invertible")))?;
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond * RCOND_MIN > 1.0 {
        return Err(Error::Singular(format!(
            "{what} has condition number {cond:.3e}"
        )));
    }
    Ok(inv)
}

/// Inverse of a general square matrix after row and column equilibration,
/// so badly scaled parameter blocks do not contaminate each other.
pub fn equilibrated_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let inv_max = |v: f64| if v > 0.0 { 1.0 / v } else { 1.0 };
    let r: Vec<f64> = (0..n).map(|i| inv_max(m.row(i).amax())).collect();
    let c: Vec<f64> = (0..n)
        .map(|j| inv_max((0..n).map(|i| (r[i] * m[(i, j)]).abs()).fold(0.0, f64::max)))
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| r[i] * m[(i, j)] * c[j]);
    let inv = scaled
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is not invertible")))?;
    let cond = norm1(&scaled) * norm1(&inv);
    if !cond.is_finite() || cond * RCOND_MIN > 1.0 {
        return Err(Error::Singular(format!("{what} has condition number {cond:.3e}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| c[i] * inv[(i, j)] * r[j]))
}

fn norm1<T: Scalar>(m: &DMatrix<T>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.value().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn select_rows<T: Scalar>(v: &DVector<T>, idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

pub fn submatrix<T: Scalar>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Minimum and maximum eigenvalue of a symmetric real matrix.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = m.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Inverse of a symmetric matrix that may be indefinite (e.g. a Hessian).
pub fn sym_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = inverse_checked(m, what)?;
    symmetrize(&mut inv);
    Ok(inv)
}
