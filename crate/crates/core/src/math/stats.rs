//! Correlation, covariance and precision-matrix kernels over `T×N` series.

use super::{Matrix, Real};
use crate::error::{Error, Result};

fn column_means<T: Real>(ts: &Matrix<T>) -> Vec<T> {
    let (t, n) = ts.shape();
    let mut means = vec![T::zero(); n];
    for i in 0..t {
        for (m, &v) in means.iter_mut().zip(ts.row(i)) {
            *m = *m + v;
        }
    }
    let tt = T::c(t as f64);
    means.iter_mut().for_each(|m| *m = *m / tt);
    means
}

/// Sum of centered cross products, `Σ_t (x_ti − x̄_i)(x_tj − x̄_j)`.
fn centered_cross_products<T: Real>(ts: &Matrix<T>) -> Matrix<T> {
    let (t, n) = ts.shape();
    let means = column_means(ts);
    let mut centered = ts.clone();
    for i in 0..t {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v = *v - m;
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for r in 0..t {
                s = s + centered[(r, i)] * centered[(r, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// Unbiased sample covariance (divisor `T−1`) of the columns of `ts`.
pub fn covariance<T: Real>(ts: &Matrix<T>) -> Result<Matrix<T>> {
    if ts.rows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: ts.rows(),
        });
    }
    let denom = T::c((ts.rows() - 1) as f64);
    Ok(centered_cross_products(ts).map(|v| v / denom))
}

/// Pearson correlation between every pair of columns. The diagonal is exactly 1.
pub fn pearson_corr_matrix<T: Real>(ts: &Matrix<T>) -> Result<Matrix<T>> {
    if ts.rows() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: ts.rows(),
        });
    }
    let n = ts.cols();
    let cp = centered_cross_products(ts);
    let norms: Vec<T> = (0..n).map(|i| cp[(i, i)].sqrt()).collect();
    if let Some(idx) = norms.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::ZeroVarianceColumn(idx));
    }
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (cp[(i, j)] / (norms[i] * norms[j])).max(-T::one()).min(T::one());
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    Ok(out)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", (x.len(), 1), (y.len(), 1)));
    }
    if x.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: x.len(),
        });
    }
    let n = T::c(x.len() as f64);
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if !(sxx > T::zero()) {
        return Err(Error::DegenerateCorr("first sample"));
    }
    if !(syy > T::zero()) {
        return Err(Error::DegenerateCorr("second sample"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

/// Default ridge strength: `1e-3 · trace(cov) / N`.
pub fn default_ridge<T: Real>(cov: &Matrix<T>) -> T {
    T::c(1e-3) * cov.trace() / T::c(cov.rows().max(1) as f64)
}

/// Lower-triangular Cholesky factor `L` with `a = L·Lᵀ`.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky", a.shape(), (n, n)));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::FactorizationFailed { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub fn spd_inverse<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let l = cholesky(a)?;
    let n = l.rows();
    // L⁻¹ by forward substitution, column by column.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { T::one() } else { T::zero() };
            for k in c..i {
                s = s - l[(i, k)] * linv[(k, c)];
            }
            linv[(i, c)] = s / l[(i, i)];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹, filled symmetrically.
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for k in j..n {
                s = s + linv[(k, i)] * linv[(k, j)];
            }
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(inv)
}

/// `(cov + ridge·I)⁻¹`.
pub fn precision_ridge<T: Real>(cov: &Matrix<T>, ridge: T) -> Result<Matrix<T>> {
    if !(ridge > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be positive, got {ridge}"
        )));
    }
    let mut reg = cov.clone();
    for i in 0..reg.rows().min(reg.cols()) {
        reg[(i, i)] = reg[(i, i)] + ridge;
    }
    spd_inverse(&reg)
}

/// Partial correlations `−p_ij / √(p_ii p_jj)` with a zero diagonal.
pub fn partial_corr<T: Real>(prec: &Matrix<T>) -> Result<Matrix<T>> {
    let n = prec.rows();
    if prec.cols() != n {
        return Err(Error::shape("partial_corr", prec.shape(), (n, n)));
    }
    if let Some(idx) = (0..n).find(|&i| !(prec[(i, i)] > T::zero())) {
        return Err(Error::NonpositiveDiagonal(idx));
    }
    let d: Vec<T> = (0..n).map(|i| prec[(i, i)].sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = -prec[(i, j)] / (d[i] * d[j]);
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    Ok(out)
}
