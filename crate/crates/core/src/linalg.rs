//! Small dense helpers shared by the cost, terminal-set and certificate code.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Builds a matrix from row-major nested rows, rejecting ragged input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parameter("matrix rows have unequal lengths".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

pub fn check_positive_definite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Parameter(format!("{name} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Parameter(format!(
            "{name} must be positive definite (min eigenvalue {})",
            lambda_min(m)
        )));
    }
    Ok(())
}

pub fn check_positive_semidefinite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Parameter(format!("{name} must be symmetric")));
    }
    let lmin = lambda_min(m);
    if lmin < -1e-12 * (1.0 + m.amax()) {
        return Err(Error::Parameter(format!(
            "{name} must be positive semidefinite (min eigenvalue {lmin})"
        )));
    }
    Ok(())
}

/// `xᵀ M x` for a square `M` stored densely.
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// `out = (M + Mᵀ) x`, the gradient of `xᵀ M x`.
pub fn quad_form_grad(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += (m[(i, j)] + m[(j, i)]) * x[j];
        }
        out[i] = acc;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
