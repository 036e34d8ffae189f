//! Dense linear-algebra helpers shared by the filter and training code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MideError, Result};

/// Exact symmetrization `(m + m')/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Cholesky with escalating diagonal jitter. Jitter starts at `1e-12` of the
/// mean diagonal and escalates by decades up to `1e-8` of it before giving up.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let dim = m.nrows();
    if dim == 0 {
        return Err(MideError::Numerical(format!(
            "{context}: cholesky of empty matrix"
        )));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let mean_diag = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / dim as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 1e-12 * scale;
    let max_jitter = 1e-8 * scale;
    while jitter <= max_jitter {
        let mut jm = m.clone();
        for i in 0..dim {
            jm[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jm) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(MideError::Numerical(format!(
        "{context}: matrix not positive definite after jitter up to {max_jitter:.3e} (dim {dim})"
    )))
}

/// `log |m|` of a positive-definite matrix through its Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Smallest eigenvalue of a symmetric matrix (test/validation helper).
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Checks symmetry within a relative tolerance and positive semi-definiteness
/// with the eigenvalue floor `-psd_tol_scale * trace / dim`.
pub fn check_covariance(m: &DMatrix<f64>, sym_rel_tol: f64, psd_tol_scale: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(MideError::Shape(format!(
            "covariance must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > sym_rel_tol * scale {
                return Err(MideError::Numerical(format!(
                    "covariance asymmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    let floor = -psd_tol_scale * m.trace() / m.nrows() as f64;
    let min_eig = min_symmetric_eigenvalue(m);
    if min_eig < floor {
        return Err(MideError::Numerical(format!(
            "covariance not PSD: min eigenvalue {min_eig:.3e} below floor {floor:.3e}"
        )));
    }
    Ok(())
}

/// Solves `S x = b` for PSD `S` via jittered Cholesky.
pub fn solve_spd(s: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    Ok(cholesky_with_jitter(s, context)?.solve(b))
}
