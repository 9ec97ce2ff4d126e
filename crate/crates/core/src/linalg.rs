//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Diagonal jitter tried once when a covariance square root fails.
pub const JITTER: f64 = 1e-9;

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
///
/// Unlike `nalgebra::Cholesky` this reports the index of the first
/// non-positive pivot, which the batch solver surfaces in its error.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of {}x{} matrix", n, a.ncols())));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Factorization { pivot: j });
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(a)?;
    let n = a.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::<f64>::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &cholesky_solve(&l, &e));
    }
    Ok(symmetrize(&inv))
}

pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

pub fn is_diagonal(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square()
        && (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)].abs() <= tol))
}

/// True when `a` is symmetric and has no eigenvalue below `-tol` (scaled by
/// the matrix magnitude).
pub fn is_symmetric_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > tol * scale {
        return false;
    }
    if a.nrows() == 0 {
        return true;
    }
    let eig = symmetrize(a).symmetric_eigenvalues();
    eig.min() >= -tol * scale
}

/// A factor `S` with `S Sᵀ = cov`, used to draw correlated Gaussian noise.
///
/// Diagonal covariances use the elementwise square root (so a zero
/// covariance is fine); otherwise Cholesky is tried, then a symmetric
/// eigen-decomposition for singular PSD matrices.
pub fn noise_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_symmetric_psd(cov, 1e-10) {
        return Err(Error::InvalidModel("noise covariance is not symmetric PSD".into()));
    }
    if is_diagonal(cov, 0.0) {
        return Ok(DMatrix::from_diagonal(&cov.diagonal().map(|v| v.max(0.0).sqrt())));
    }
    if let Ok(l) = cholesky_lower(cov) {
        return Ok(l);
    }
    let eig = symmetrize(cov).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Cholesky factor of a covariance, retrying once with `JITTER·I` added.
pub fn sqrt_with_jitter(p: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    match cholesky_lower(p) {
        Ok(l) => Ok(l),
        Err(_) => {
            let n = p.nrows();
            let jittered = p + DMatrix::<f64>::identity(n, n) * JITTER;
            log::debug!("covariance square root failed at step {step}; retrying with jitter");
            cholesky_lower(&jittered).map_err(|_| Error::Singular {
                step,
                what: "covariance square root failed even with jitter".into(),
            })
        }
    }
}
