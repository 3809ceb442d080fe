//! Linear-quadratic terminal gain for a model linearized at its reference.

use nalgebra::{Complex, DMatrix};

use crate::dynamics::Dynamics;
use crate::error::{check_dim, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalGain {
    /// `u = K e`.
    pub k: DMatrix<f64>,
    /// Stabilizing solution of the continuous algebraic Riccati equation.
    pub p: DMatrix<f64>,
}

/// Hautus test on every eigenvalue with nonnegative real part: fails with the
/// offending eigenvalue and a left null direction of `[A − λI, B]`.
pub fn pbh_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b.nrows())?;
    let m = b.ncols();
    let scale = 1.0 + a.amax().max(b.amax());
    let tol = 1e-9 * scale;
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.re < -tol {
            continue;
        }
        let mut h = DMatrix::<Complex<f64>>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            h[(i, i)] -= lambda;
            for j in 0..m {
                h[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let svd = h.svd(true, false);
        let (idx, smin) = svd
            .singular_values
            .iter()
            .enumerate()
            .map(|(i, s)| (i, *s))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap_or((0, 0.0));
        if smin <= 1e-8 * scale {
            let u = svd.u.expect("left vectors requested");
            let col = u.column(idx);
            let pivot = col
                .iter()
                .copied()
                .max_by(|x, y| x.norm().total_cmp(&y.norm()))
                .unwrap_or(Complex::new(1.0, 0.0));
            let phase = pivot.conj() / pivot.norm();
            let direction = col.iter().map(|c| clean((c * phase).re)).collect();
            return Err(Error::Unstabilizable {
                eigenvalue: format!("{}{:+}i", clean(lambda.re), clean(lambda.im)),
                direction,
            });
        }
    }
    Ok(())
}

fn clean(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        0.0
    } else {
        x
    }
}

/// Stabilizing solution of `AᵀP + PA − PBR⁻¹BᵀP + Q = 0` via the matrix sign
/// function of the Hamiltonian.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b.nrows())?;
    check_dim(n, q.nrows())?;
    check_dim(b.ncols(), r.nrows())?;
    linalg::check_positive_semidefinite("Q", q)?;
    linalg::check_positive_definite("R", r)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Parameter("R is singular".into()))?;
    let g = b * &r_inv * b.transpose();
    let mut z = DMatrix::<f64>::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&(-&g));
    z.view_mut((n, 0), (n, n)).copy_from(&(-q));
    z.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut converged = false;
    for _ in 0..100 {
        let det = z.determinant();
        let inv = z.clone().try_inverse();
        let Some(inv) = inv.filter(|_| det.is_finite() && det != 0.0) else {
            return Err(Error::Parameter(
                "Hamiltonian has eigenvalues on the imaginary axis; the pair is not stabilizable".into(),
            ));
        };
        let c = det.abs().powf(1.0 / (2.0 * n as f64));
        let next = (&z / c + inv * c) * 0.5;
        let delta = (&next - &z).amax();
        z = next;
        if delta <= 1e-13 * (1.0 + z.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Parameter("matrix sign iteration did not converge".into()));
    }
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Parameter(format!("Riccati least squares failed: {e}")))?;
    let p = linalg::symmetrize(&p);
    let residual = a.transpose() * &p + &p * a - &p * &g * &p + q;
    if residual.amax() > 1e-8 * (1.0 + p.amax() * (1.0 + a.amax() + g.amax() * p.amax())) {
        return Err(Error::Parameter(format!(
            "Riccati residual too large: {}",
            residual.amax()
        )));
    }
    Ok(p)
}

/// Linearizes `model` at `(z_des, u_eq)` and returns the LQ gain and its
/// Riccati matrix.
pub fn synthesize_terminal_gain(
    model: &dyn Dynamics,
    z_des: &[f64],
    u_eq: &[f64],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<TerminalGain> {
    let (n, m) = (model.state_dim(), model.input_dim());
    check_dim(n, z_des.len())?;
    check_dim(m, u_eq.len())?;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    model.jacobians(z_des, u_eq, &mut a, &mut b)?;
    let a = DMatrix::from_row_slice(n, n, &a);
    let b = DMatrix::from_row_slice(n, m, &b);
    pbh_stabilizable(&a, &b)?;
    let p = solve_care(&a, &b, q, r)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Parameter("R is singular".into()))?;
    let k = -(r_inv * b.transpose() * &p);
    Ok(TerminalGain { k, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearModel, Unicycle};

    #[test]
    fn single_integrator_gain() {
        let model = LinearModel::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 1).unwrap();
        let q = DMatrix::identity(1, 1);
        let g = synthesize_terminal_gain(&model, &[0.0], &[0.0], &q, &q).unwrap();
        assert!((g.k[(0, 0)] + 1.0).abs() < 1e-10);
        assert!((g.p[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn double_integrator_gain() {
        let model = LinearModel::double_integrator(1);
        let g = synthesize_terminal_gain(
            &model,
            &[0.0, 0.0],
            &[0.0],
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        let s3 = 3f64.sqrt();
        assert!((g.k[(0, 0)] + 1.0).abs() < 1e-9);
        assert!((g.k[(0, 1)] + s3).abs() < 1e-9);
        let expected = DMatrix::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3]);
        assert!((g.p - expected).amax() < 1e-9);
    }

    #[test]
    fn hurwitz_model_passes_and_uncontrollable_mode_is_named() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        match pbh_stabilizable(&a, &b) {
            Err(Error::Unstabilizable { direction, .. }) => {
                assert!(direction[0].abs() < 1e-9 && (direction[1].abs() - 1.0).abs() < 1e-9)
            }
            other => panic!("expected unstabilizable, got {other:?}"),
        }
        let stable = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        assert!(pbh_stabilizable(&stable, &b).is_ok());
    }

    #[test]
    fn unicycle_at_rest_is_unstabilizable() {
        let err = synthesize_terminal_gain(
            &Unicycle,
            &[0.0, 0.0, 0.0],
            &[0.0, 0.0],
            &DMatrix::identity(3, 3),
            &DMatrix::identity(2, 2),
        )
        .unwrap_err();
        match err {
            Error::Unstabilizable { direction, .. } => {
                assert!(direction[0].abs() < 1e-9 && (direction[1].abs() - 1.0).abs() < 1e-9 && direction[2].abs() < 1e-9)
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
