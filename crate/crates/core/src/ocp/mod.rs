//! Per-agent finite-horizon optimal control: problem data, the shooting
//! solver, terminal ingredients and warm starts.

mod riccati;
mod solver;
mod terminal;

use nalgebra::DMatrix;

use crate::dynamics::{integrate, Dynamics, ErrorDynamics, ZohInput};
use crate::constraints::{stage_count, ConstraintBuilder, ConstraintKind, ScalarConstraint, TerminalSet};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::setalg::TubeProfile;

pub use riccati::{pbh_stabilizable, solve_care, synthesize_terminal_gain, TerminalGain};
pub use solver::{solve_fhocp, solve_fhocp_with_guesses};
pub use terminal::{
    decrease_condition, terminal_controller, DecreaseReport, KappaOutput, LinearFeedback, PolarSteering,
    TerminalController,
};

/// Iteration budgets and tolerances of the augmented-Lagrangian solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Largest admissible constraint violation at a returned solution.
    pub constraint_tol: f64,
    /// Projected-gradient norm at which an inner solve counts as stationary.
    pub stationarity_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub relaxation: RelaxationSettings,
    /// Record one diagnostics row per inner iteration.
    pub diagnostics: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-6,
            stationarity_tol: 1e-7,
            max_outer: 200,
            max_inner: 2000,
            initial_penalty: 10.0,
            max_penalty: 1e8,
            relaxation: RelaxationSettings::default(),
            diagnostics: false,
        }
    }
}

/// Fallback used when the fully tightened problem has no solution: the
/// executed segment keeps its hard tightened constraints while the tail
/// constraints (tightened only up to the executed segment's tube radius)
/// become quadratic penalties. The terminal constraint stays hard first and
/// is turned into a penalty of `terminal_weight` only when no guess reaches
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSettings {
    pub enabled: bool,
    pub tail_weight: f64,
    pub terminal_weight: f64,
}

impl Default for RelaxationSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            tail_weight: 1e4,
            terminal_weight: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub h: f64,
    pub horizon: f64,
    /// RK4 steps per sampling period.
    pub substeps: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: TerminalSet,
    pub input_bound: f64,
    pub solver: SolverSettings,
}

impl OcpConfig {
    pub fn new(
        h: f64,
        horizon: f64,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        terminal: TerminalSet,
        input_bound: f64,
    ) -> Result<Self> {
        let cfg = Self {
            h,
            horizon,
            substeps: 10,
            q,
            r,
            terminal,
            input_bound,
            solver: SolverSettings::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        stage_count(self.h, self.horizon)?;
        if self.substeps == 0 {
            return Err(Error::Parameter("substeps must be positive".into()));
        }
        linalg::check_positive_semidefinite("Q", &self.q)?;
        linalg::check_positive_definite("R", &self.r)?;
        check_dim(self.q.nrows(), self.terminal.dim())?;
        if !(self.input_bound > 0.0) {
            return Err(Error::Parameter("input bound must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        stage_count(self.h, self.horizon).expect("validated horizon")
    }

    pub fn dt(&self) -> f64 {
        self.h / self.substeps as f64
    }

    /// Number of integration points after the initial one.
    pub fn points(&self) -> usize {
        self.stages() * self.substeps
    }
}

/// `eᵀ Q e + uᵀ R u`.
pub fn stage_cost(e: &[f64], u: &[f64], q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    check_dim(q.nrows(), e.len())?;
    check_dim(r.nrows(), u.len())?;
    Ok(linalg::quad_form(q, e) + linalg::quad_form(r, u))
}

/// Untightened constraints at every integration point `τ_j = j·dt`,
/// `j = 1..=N·substeps`, together with the tube used to tighten them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGrid {
    pub dt: f64,
    pub h: f64,
    pub points: Vec<Vec<ScalarConstraint>>,
    pub profile: TubeProfile,
}

/// How the grid's constraints enter a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Tightened by `ρ(τ)` everywhere and enforced as hard constraints.
    Strict,
    /// Hard on `τ ≤ h`; on the tail the tightening saturates at `ρ(h)`.
    Relaxed,
}

impl ConstraintGrid {
    pub fn build(builder: &dyn ConstraintBuilder, profile: TubeProfile, config: &OcpConfig) -> Result<Self> {
        let dt = config.dt();
        let points = (1..=config.points())
            .map(|j| builder.constraints_at(j as f64 * dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dt,
            h: config.h,
            points,
            profile,
        })
    }

    pub fn unconstrained(config: &OcpConfig) -> Self {
        Self {
            dt: config.dt(),
            h: config.h,
            points: vec![Vec::new(); config.points()],
            profile: TubeProfile {
                w_bar: 0.0,
                lipschitz: 0.0,
            },
        }
    }

    pub fn tau(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.dt
    }

    /// True when point `j` lies in the executed segment `(0, h]`.
    pub fn in_executed_segment(&self, j: usize) -> bool {
        self.tau(j) <= self.h + 1e-12
    }

    /// Constraints at point `j` after tightening for `mode`.
    pub fn tightened(&self, j: usize, mode: GridMode) -> Result<Vec<ScalarConstraint>> {
        let tau = self.tau(j);
        let eff = match mode {
            GridMode::Strict => tau,
            GridMode::Relaxed => tau.min(self.h),
        };
        crate::constraints::tighten(&self.points[j], eff, &self.profile)
    }

    /// First point whose strictly tightened constraints are empty for every
    /// state.
    pub fn first_empty_point(&self) -> Result<Option<usize>> {
        for j in 0..self.points.len() {
            if crate::constraints::structurally_empty(&self.tightened(j, GridMode::Strict)?) {
                return Ok(Some(j));
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

impl SolveStatus {
    pub fn label(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible_suboptimal",
            SolveStatus::Infeasible => "infeasible",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "optimal" => Some(SolveStatus::Optimal),
            "feasible_suboptimal" => Some(SolveStatus::FeasibleSuboptimal),
            "infeasible" => Some(SolveStatus::Infeasible),
            _ => None,
        }
    }
}

/// Why and by how much a relaxed solve departs from the strict problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    /// The strictly tightened sets were empty at this horizon offset, or
    /// `None` when the strict solve was attempted and failed.
    pub empty_from: Option<f64>,
    /// Largest violation of the saturated tail constraints.
    pub tail_violation: f64,
    /// `max(0, V(e_N) − ε_Ω)`.
    pub terminal_excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_time: f64,
    pub constraint_residual: f64,
    pub strict_attempted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub outer: usize,
    pub inner: usize,
    pub merit: f64,
    pub cost: f64,
    pub residual: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub inputs: Vec<Vec<f64>>,
    /// Nominal errors at the `N + 1` stage boundaries.
    pub predicted_errors: Vec<Vec<f64>>,
    /// Nominal errors at every integration point.
    pub dense_errors: Vec<Vec<f64>>,
    pub dense_step: f64,
    /// `Σ_k h·F(e_k, u_k) + V(e_N)`, without any relaxation penalty.
    pub cost: f64,
    pub status: SolveStatus,
    pub relaxation: Option<Relaxation>,
    /// Smallest hard-constraint margin and its kind.
    pub worst_margin: Option<(ConstraintKind, f64)>,
    pub stats: SolveStats,
    pub diagnostics: Vec<DiagnosticRow>,
}

impl HorizonSolution {
    pub fn is_feasible(&self) -> bool {
        self.status != SolveStatus::Infeasible
    }

    /// `∫‖ē(s)‖² ds` over the first sampling period (composite Simpson on the
    /// integration grid, trapezoid when the count is odd).
    pub fn first_stage_error_energy(&self, substeps: usize) -> f64 {
        let f: Vec<f64> = self.dense_errors[..=substeps]
            .iter()
            .map(|e| e.iter().map(|v| v * v).sum())
            .collect();
        integrate_samples(&f, self.dense_step)
    }
}

pub(crate) fn integrate_samples(f: &[f64], dt: f64) -> f64 {
    let n = f.len() - 1;
    if n % 2 == 0 && n > 0 {
        let mut acc = f[0] + f[n];
        for (i, v) in f.iter().enumerate().take(n).skip(1) {
            acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        acc * dt / 3.0
    } else {
        f.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum()
    }
}

/// Inputs of the nominal closed loop under `kappa`, sampled at the stage
/// starts and held over each stage.
pub fn kappa_rollout(
    model: &ErrorDynamics,
    e0: &[f64],
    kappa: &dyn TerminalController,
    config: &OcpConfig,
) -> Result<Vec<Vec<f64>>> {
    check_dim(model.state_dim(), e0.len())?;
    let mut e = e0.to_vec();
    let mut inputs = Vec::with_capacity(config.stages());
    for _ in 0..config.stages() {
        let u = kappa.control(&e).input;
        let traj = integrate(model, &e, &ZohInput::constant(u.clone()), None, 0.0, config.h, config.dt())?;
        e = traj.final_state().to_vec();
        inputs.push(u);
    }
    Ok(inputs)
}

/// Drops the first stage and appends one stage of the terminal controller
/// evaluated at the end of the previous prediction.
pub fn warm_start_shift(previous: &HorizonSolution, kappa: &dyn TerminalController) -> Vec<Vec<f64>> {
    let mut next: Vec<Vec<f64>> = previous.inputs[1..].to_vec();
    let tail = previous
        .predicted_errors
        .last()
        .expect("prediction has at least one state");
    next.push(kappa.control(tail).input);
    next
}
