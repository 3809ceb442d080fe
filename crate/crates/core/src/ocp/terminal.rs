//! Local controllers used inside the terminal region and a sampled check of
//! the terminal decrease condition.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::TerminalSet;
use crate::dynamics::{sample_ball, wrap_angle, Dynamics, ErrorDynamics};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// A local control law and whether it exceeded the input bound.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaOutput {
    pub input: Vec<f64>,
    pub exceeds_bound: bool,
}

/// Control law applied inside the terminal region.
pub trait TerminalController: Send + Sync + fmt::Debug {
    fn control(&self, e: &[f64]) -> KappaOutput;
}

/// `κ(e) = K e`, returned unclipped; the flag reports `‖K e‖ > ū`.
pub fn terminal_controller(e: &[f64], k: &DMatrix<f64>, u_bar: f64) -> Result<KappaOutput> {
    check_dim(k.ncols(), e.len())?;
    let input: Vec<f64> = (0..k.nrows())
        .map(|i| (0..k.ncols()).map(|j| k[(i, j)] * e[j]).sum())
        .collect();
    let exceeds_bound = linalg::norm(&input) > u_bar;
    Ok(KappaOutput { input, exceeds_bound })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeedback {
    pub k: DMatrix<f64>,
    pub u_bar: f64,
}

impl TerminalController for LinearFeedback {
    fn control(&self, e: &[f64]) -> KappaOutput {
        terminal_controller(e, &self.k, self.u_bar).expect("gain sized to the error state")
    }
}

/// Distance/bearing steering law for the unicycle error `(x, y, θ)`.
///
/// The position error is expressed in the goal frame, the robot drives
/// backwards when the goal lies behind it, and the output is scaled onto the
/// input ball when it exceeds `ū`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSteering {
    pub k_rho: f64,
    pub k_alpha: f64,
    pub k_beta: f64,
    /// Desired heading, used to rotate the position error into the goal frame.
    pub heading_ref: f64,
    pub u_bar: f64,
}

impl PolarSteering {
    pub fn new(heading_ref: f64, u_bar: f64) -> Self {
        Self {
            k_rho: 3.0,
            k_alpha: 8.0,
            k_beta: -1.5,
            heading_ref,
            u_bar,
        }
    }

    /// True for gains satisfying the local stability conditions of the law.
    pub fn gains_valid(&self) -> bool {
        self.k_rho > 0.0 && self.k_beta < 0.0 && self.k_alpha > self.k_rho
    }
}

impl TerminalController for PolarSteering {
    fn control(&self, e: &[f64]) -> KappaOutput {
        let (c, s) = (self.heading_ref.cos(), self.heading_ref.sin());
        let dx = c * e[0] + s * e[1];
        let dy = -s * e[0] + c * e[1];
        let phi = wrap_angle(e[2]);
        let rho = dx.hypot(dy);
        let (v, w) = if rho < 1e-9 {
            (0.0, -self.k_alpha * phi)
        } else {
            let alpha = wrap_angle((-dy).atan2(-dx) - phi);
            if alpha.abs() <= std::f64::consts::FRAC_PI_2 {
                let beta = wrap_angle(-phi - alpha);
                (self.k_rho * rho, self.k_alpha * alpha + self.k_beta * beta)
            } else {
                let alpha = wrap_angle(alpha + std::f64::consts::PI);
                let beta = wrap_angle(-phi - alpha);
                (-self.k_rho * rho, self.k_alpha * alpha + self.k_beta * beta)
            }
        };
        let mut input = vec![v, w];
        let nrm = linalg::norm(&input);
        let exceeds_bound = nrm > self.u_bar;
        if exceeds_bound {
            input.iter_mut().for_each(|x| *x *= self.u_bar / nrm);
        }
        KappaOutput { input, exceeds_bound }
    }
}

/// Outcome of sampling `∇V·g(e, κ(e)) + F(e, κ(e)) ≤ tol` over `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecreaseReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest left-hand side seen and the sample attaining it.
    pub worst: f64,
    pub worst_error: Vec<f64>,
    /// Samples where `κ` left the input ball.
    pub bound_exceedances: usize,
}

impl DecreaseReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.bound_exceedances == 0
    }
}

/// Samples `Ψ = {e : eᵀPe ≤ ε_Ψ}` uniformly and evaluates the decrease
/// condition of the terminal cost under `κ`.
#[allow(clippy::too_many_arguments)]
pub fn decrease_condition(
    model: &ErrorDynamics,
    term: &TerminalSet,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    kappa: &dyn TerminalController,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<DecreaseReport> {
    let n = model.state_dim();
    check_dim(n, term.dim())?;
    check_dim(n, q.nrows())?;
    let chol = term
        .p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Parameter("terminal weight must be positive definite".into()))?;
    let lt = chol.l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DecreaseReport {
        samples,
        violations: 0,
        worst: f64::NEG_INFINITY,
        worst_error: vec![0.0; n],
        bound_exceedances: 0,
    };
    let mut grad = vec![0.0; n];
    let mut g = vec![0.0; n];
    for _ in 0..samples {
        let y = nalgebra::DVector::from_vec(sample_ball(&mut rng, n, term.eps_psi.sqrt()));
        let e = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::Parameter("singular terminal factor".into()))?;
        let e = e.as_slice();
        let k = kappa.control(e);
        check_dim(r.nrows(), k.input.len())?;
        model.field(e, &k.input, &mut g)?;
        linalg::quad_form_grad(&term.p, e, &mut grad);
        let lhs = grad.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            + linalg::quad_form(q, e)
            + linalg::quad_form(r, &k.input);
        if lhs > tol {
            report.violations += 1;
        }
        if k.exceeds_bound {
            report.bound_exceedances += 1;
        }
        if lhs > report.worst {
            report.worst = lhs;
            report.worst_error = e.to_vec();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_feedback_examples() {
        let k = -DMatrix::<f64>::identity(3, 3);
        let out = terminal_controller(&[0.0; 3], &k, 1.0).unwrap();
        assert_eq!(out.input, vec![0.0; 3]);
        let out = terminal_controller(&[0.1, 0.2, 0.3], &k, 1.0).unwrap();
        assert_eq!(out.input, vec![-0.1, -0.2, -0.3]);
        assert!(!out.exceeds_bound);
        let out = terminal_controller(&[10.0, 0.0, 0.0], &k, 1.0).unwrap();
        assert!(out.exceeds_bound);
        assert_eq!(out.input[0], -10.0);
        assert!(terminal_controller(&[1.0; 2], &k, 1.0).is_err());
    }

    #[test]
    fn polar_steering_directions() {
        let kappa = PolarSteering::new(0.0, 100.0);
        assert!(kappa.gains_valid());
        // goal straight ahead: drive forward, no turn
        let u = kappa.control(&[-1.0, 0.0, 0.0]).input;
        assert!(u[0] > 0.0 && u[1].abs() < 1e-12);
        // goal straight behind: reverse
        let u = kappa.control(&[1.0, 0.0, 0.0]).input;
        assert!(u[0] < 0.0 && u[1].abs() < 1e-12);
        // at the goal position, rotate the heading error away
        let u = kappa.control(&[0.0, 0.0, 0.4]).input;
        assert_eq!(u[0], 0.0);
        assert!(u[1] < 0.0);
        let out = PolarSteering::new(0.0, 1.0).control(&[-5.0, 3.0, 0.0]);
        assert!(out.exceeds_bound);
        assert!((linalg::norm(&out.input) - 1.0).abs() < 1e-12);
    }
}
