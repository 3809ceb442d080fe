//! Scalar state constraints, tube tightening, and terminal sets.
//!
//! Each constraint is a margin function of the absolute state that is
//! nonnegative when satisfied. Tightening subtracts `L · ρ(τ)` from the
//! margin, which realizes the Pontryagin difference of the constraint set by
//! a norm ball of radius `ρ(τ)` exactly for `L`-Lipschitz margins.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use nalgebra::DMatrix;

use crate::dynamics::ZohInput;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::setalg::{Ball, TubeProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintKind {
    InterAgent,
    Neighbor,
    Obstacle,
    Workspace,
    Pitch,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 5] = [
        ConstraintKind::InterAgent,
        ConstraintKind::Neighbor,
        ConstraintKind::Obstacle,
        ConstraintKind::Workspace,
        ConstraintKind::Pitch,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConstraintKind::InterAgent => "inter_agent",
            ConstraintKind::Neighbor => "neighbor",
            ConstraintKind::Obstacle => "obstacle",
            ConstraintKind::Workspace => "workspace",
            ConstraintKind::Pitch => "pitch",
        }
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Geometry of a margin function over the absolute state.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintForm {
    /// `‖p − point‖ − threshold`.
    MinDistance { point: Vec<f64>, threshold: f64 },
    /// `threshold − ‖p − point‖`.
    MaxDistance { point: Vec<f64>, threshold: f64 },
    /// `state[index] − bound` when `lower`, else `bound − state[index]`.
    Coordinate { index: usize, bound: f64, lower: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarConstraint {
    pub kind: ConstraintKind,
    pub form: ConstraintForm,
    /// Lipschitz constant of the margin with respect to the state error.
    pub lipschitz: f64,
    /// Amount already removed by tightening.
    pub offset: f64,
    /// Other agent or obstacle index the constraint refers to.
    pub target: Option<usize>,
}

/// Distances below this are treated as coincident when forming gradients.
const COINCIDENT: f64 = 1e-12;

impl ScalarConstraint {
    pub fn margin(&self, z: &[f64]) -> f64 {
        self.raw_margin(z) - self.offset
    }

    fn raw_margin(&self, z: &[f64]) -> f64 {
        match &self.form {
            ConstraintForm::MinDistance { point, threshold } => {
                linalg::distance(&z[..point.len()], point) - threshold
            }
            ConstraintForm::MaxDistance { point, threshold } => {
                threshold - linalg::distance(&z[..point.len()], point)
            }
            ConstraintForm::Coordinate { index, bound, lower } => {
                if *lower {
                    z[*index] - bound
                } else {
                    bound - z[*index]
                }
            }
        }
    }

    /// Margin and its gradient with respect to the state.
    pub fn margin_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        match &self.form {
            ConstraintForm::MinDistance { point, .. } | ConstraintForm::MaxDistance { point, .. } => {
                let sign = if matches!(self.form, ConstraintForm::MinDistance { .. }) {
                    1.0
                } else {
                    -1.0
                };
                let d = linalg::distance(&z[..point.len()], point);
                if d > COINCIDENT {
                    for k in 0..point.len() {
                        grad[k] = sign * (z[k] - point[k]) / d;
                    }
                } else {
                    grad[0] = sign;
                }
            }
            ConstraintForm::Coordinate { index, lower, .. } => {
                grad[*index] = if *lower { 1.0 } else { -1.0 };
            }
        }
        self.margin(z)
    }

    /// Upper bound of the margin over all states, used to detect constraint
    /// sets that are empty regardless of the trajectory.
    pub fn margin_ceiling(&self) -> f64 {
        match &self.form {
            ConstraintForm::MinDistance { .. } => f64::INFINITY,
            ConstraintForm::MaxDistance { threshold, .. } => threshold - self.offset,
            ConstraintForm::Coordinate { .. } => f64::INFINITY,
        }
    }
}

/// Returns copies of `constraints` with margins reduced by `L · ρ(tau)`.
pub fn tighten(constraints: &[ScalarConstraint], tau: f64, profile: &TubeProfile) -> Result<Vec<ScalarConstraint>> {
    let rho = profile.radius(tau)?;
    Ok(constraints
        .iter()
        .map(|c| ScalarConstraint {
            offset: c.offset + c.lipschitz * rho,
            ..c.clone()
        })
        .collect())
}

/// True when the constraints cannot hold simultaneously for any state: a
/// margin ceiling below zero, a pair of pitch bounds that cross, or a
/// minimum and maximum distance to the same point that leave no annulus.
pub fn structurally_empty(constraints: &[ScalarConstraint]) -> bool {
    if constraints.iter().any(|c| c.margin_ceiling() < 0.0) {
        return true;
    }
    for a in constraints {
        for b in constraints {
            match (&a.form, &b.form) {
                (
                    ConstraintForm::MinDistance { point: pa, threshold: ta },
                    ConstraintForm::MaxDistance { point: pb, threshold: tb },
                ) if pa == pb => {
                    if ta + a.offset > tb - b.offset {
                        return true;
                    }
                }
                (
                    ConstraintForm::Coordinate { index: ia, bound: ba, lower: true },
                    ConstraintForm::Coordinate { index: ib, bound: bb, lower: false },
                ) if ia == ib => {
                    if ba + a.offset > bb - b.offset {
                        return true;
                    }
                }
                _ => {}
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentGeometry {
    pub radius: f64,
    /// Sensing range `d_i`.
    pub sensing_range: f64,
    /// Obstacle-detection range `b_i`.
    pub detection_range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub workspace: Ball,
    pub obstacles: Vec<Ball>,
    pub agents: Vec<AgentGeometry>,
    /// Safety margin `ε`.
    pub margin: f64,
    /// Fixed neighbor sets, by agent index.
    pub neighbors: Vec<Vec<usize>>,
}

impl WorldModel {
    pub fn new(
        workspace: Ball,
        obstacles: Vec<Ball>,
        agents: Vec<AgentGeometry>,
        margin: f64,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let w = Self {
            workspace,
            obstacles,
            agents,
            margin,
            neighbors,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.workspace.dim();
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("safety margin must be positive, got {}", self.margin)));
        }
        for o in &self.obstacles {
            check_dim(dim, o.dim())?;
        }
        if self.neighbors.len() != self.agents.len() {
            return Err(Error::Config("one neighbor set per agent is required".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.radius > 0.0) || a.radius >= self.workspace.radius() {
                return Err(Error::Config(format!(
                    "agent {} radius {} must be positive and below the workspace radius",
                    i + 1,
                    a.radius
                )));
            }
            if a.detection_range <= a.radius {
                return Err(Error::Config(format!(
                    "agent {} detection range must exceed its radius",
                    i + 1
                )));
            }
            for (j, b) in self.agents.iter().enumerate() {
                if i != j && a.sensing_range <= a.radius + b.radius {
                    return Err(Error::Config(format!(
                        "agent {} sensing range {} must exceed the contact distance {} to agent {}",
                        i + 1,
                        a.sensing_range,
                        a.radius + b.radius,
                        j + 1
                    )));
                }
            }
            if self.neighbors[i].is_empty() {
                return Err(Error::Config(format!("agent {} has no neighbors", i + 1)));
            }
            if self.neighbors[i].iter().any(|&j| j == i || j >= self.agents.len()) {
                return Err(Error::Config(format!("agent {} has an invalid neighbor", i + 1)));
            }
        }
        Ok(())
    }

    /// Whether obstacle `l` lies within the detection range of a body at `p`.
    pub fn detects(&self, agent: usize, p: &[f64], l: usize) -> bool {
        let o = &self.obstacles[l];
        linalg::distance(p, o.center().as_slice()) - o.radius() <= self.agents[agent].detection_range
    }
}

/// Per-stage margins for agent `agent`.
///
/// `sensing` lists the agents that get collision constraints and
/// `others_predicted` maps every agent in `sensing` or in the neighbor set to
/// its position at the stage time. `pitch_index` adds the two pitch bounds.
pub fn build_stage_constraints(
    agent: usize,
    world: &WorldModel,
    sensing: &[usize],
    others_predicted: &BTreeMap<usize, Vec<f64>>,
    known_obstacles: &[usize],
    pitch_index: Option<usize>,
) -> Result<Vec<ScalarConstraint>> {
    let me = world.agents[agent];
    let eps = world.margin;
    let mut out = Vec::new();
    let lookup = |j: usize| -> Result<&Vec<f64>> {
        others_predicted.get(&j).ok_or(Error::Protocol {
            agent: j,
            requester: agent,
        })
    };
    for &j in sensing {
        if j == agent {
            continue;
        }
        out.push(ScalarConstraint {
            kind: ConstraintKind::InterAgent,
            form: ConstraintForm::MinDistance {
                point: lookup(j)?.clone(),
                threshold: me.radius + world.agents[j].radius + eps,
            },
            lipschitz: 1.0,
            offset: 0.0,
            target: Some(j),
        });
    }
    for &j in &world.neighbors[agent] {
        out.push(ScalarConstraint {
            kind: ConstraintKind::Neighbor,
            form: ConstraintForm::MaxDistance {
                point: lookup(j)?.clone(),
                threshold: me.sensing_range - eps,
            },
            lipschitz: 1.0,
            offset: 0.0,
            target: Some(j),
        });
    }
    for &l in known_obstacles {
        let o = &world.obstacles[l];
        out.push(ScalarConstraint {
            kind: ConstraintKind::Obstacle,
            form: ConstraintForm::MinDistance {
                point: o.center().as_slice().to_vec(),
                threshold: me.radius + o.radius() + eps,
            },
            lipschitz: 1.0,
            offset: 0.0,
            target: Some(l),
        });
    }
    out.push(ScalarConstraint {
        kind: ConstraintKind::Workspace,
        form: ConstraintForm::MaxDistance {
            point: world.workspace.center().as_slice().to_vec(),
            threshold: world.workspace.radius() - me.radius - eps,
        },
        lipschitz: 1.0,
        offset: 0.0,
        target: None,
    });
    if let Some(idx) = pitch_index {
        for lower in [true, false] {
            out.push(ScalarConstraint {
                kind: ConstraintKind::Pitch,
                form: ConstraintForm::Coordinate {
                    index: idx,
                    bound: if lower { -(FRAC_PI_2 - eps) } else { FRAC_PI_2 - eps },
                    lower,
                },
                lipschitz: 1.0,
                offset: 0.0,
                target: None,
            });
        }
    }
    Ok(out)
}

/// Terminal ingredients: `V(e) = eᵀ P e` with sublevel sets `Ω` (`V ≤ ε_Ω`)
/// and `Ψ` (`V ≤ ε_Ψ`).
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet {
    pub p: DMatrix<f64>,
    pub eps_omega: f64,
    pub eps_psi: f64,
}

impl TerminalSet {
    pub fn new(p: DMatrix<f64>, eps_omega: f64, eps_psi: f64) -> Result<Self> {
        linalg::check_positive_definite("terminal weight P", &p)?;
        if !(eps_omega > 0.0) || !(eps_psi > eps_omega) {
            return Err(Error::Parameter(format!(
                "terminal levels must satisfy 0 < eps_omega < eps_psi, got {eps_omega} and {eps_psi}"
            )));
        }
        Ok(Self { p, eps_omega, eps_psi })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

pub fn terminal_value(e: &[f64], term: &TerminalSet) -> Result<f64> {
    check_dim(term.dim(), e.len())?;
    Ok(linalg::quad_form(&term.p, e))
}

/// Membership in `(Ω, Ψ)`; both sets are closed.
pub fn in_terminal(e: &[f64], term: &TerminalSet) -> Result<(bool, bool)> {
    let v = terminal_value(e, term)?;
    Ok((v <= term.eps_omega, v <= term.eps_psi))
}

/// Source of untightened constraints for a given elapsed time into the
/// horizon.
pub trait ConstraintBuilder {
    fn constraints_at(&self, tau: f64) -> Result<Vec<ScalarConstraint>>;
}

impl<F> ConstraintBuilder for F
where
    F: Fn(f64) -> Result<Vec<ScalarConstraint>>,
{
    fn constraints_at(&self, tau: f64) -> Result<Vec<ScalarConstraint>> {
        self(tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateViolation {
    pub stage: usize,
    pub tau: f64,
    pub kind: ConstraintKind,
    pub margin: f64,
}

/// Outcome of the four admissibility conditions; `None` means pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub piecewise_continuous: bool,
    /// First stage whose input norm exceeds the bound, with that norm.
    pub input_violation: Option<(usize, f64)>,
    pub state_violation: Option<StateViolation>,
    /// Terminal value when it lies outside `Ω`.
    pub terminal_violation: Option<f64>,
}

impl AdmissibilityReport {
    pub fn admissible(&self) -> bool {
        self.piecewise_continuous
            && self.input_violation.is_none()
            && self.state_violation.is_none()
            && self.terminal_violation.is_none()
    }
}

/// Parameters shared by the admissibility check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonGrid {
    pub h: f64,
    pub horizon: f64,
    pub substeps: usize,
    pub input_bound: f64,
}

impl HorizonGrid {
    pub fn stages(&self) -> Result<usize> {
        stage_count(self.h, self.horizon)
    }
}

pub fn stage_count(h: f64, horizon: f64) -> Result<usize> {
    if !(h > 0.0) || !(horizon > h) {
        return Err(Error::Parameter(format!(
            "need 0 < h < T_p, got h = {h}, T_p = {horizon}"
        )));
    }
    let n = (horizon / h).round();
    if (n * h - horizon).abs() > 1e-9 {
        return Err(Error::Parameter(format!("T_p = {horizon} is not a multiple of h = {h}")));
    }
    Ok(n as usize)
}

/// Checks an input sequence against the admissibility conditions: bounded
/// ZOH inputs, tightened state constraints at every integration point of the
/// nominal error trajectory, and a terminal error inside `Ω`.
pub fn check_admissible(
    inputs: &[Vec<f64>],
    e0: &[f64],
    error_model: &crate::dynamics::ErrorDynamics,
    builder: &dyn ConstraintBuilder,
    term: &TerminalSet,
    profile: &TubeProfile,
    grid: &HorizonGrid,
) -> Result<AdmissibilityReport> {
    let n_stages = grid.stages()?;
    check_dim(n_stages, inputs.len())?;
    let mut report = AdmissibilityReport {
        piecewise_continuous: inputs.iter().all(|u| u.iter().all(|v| v.is_finite())),
        input_violation: None,
        state_violation: None,
        terminal_violation: None,
    };
    for (k, u) in inputs.iter().enumerate() {
        let nrm = linalg::norm(u);
        if nrm > grid.input_bound {
            report.input_violation = Some((k, nrm));
            break;
        }
    }
    let dt = grid.h / grid.substeps as f64;
    let zoh = ZohInput {
        period: grid.h,
        values: inputs.to_vec(),
    };
    let traj = crate::dynamics::integrate(error_model, e0, &zoh, None, 0.0, grid.horizon, dt)?;
    let mut z = vec![0.0; e0.len()];
    'outer: for (idx, e) in traj.states.iter().enumerate().skip(1) {
        let tau = idx as f64 * dt;
        error_model.state_of(e, &mut z);
        let cons = tighten(&builder.constraints_at(tau)?, tau, profile)?;
        for c in &cons {
            let m = c.margin(&z);
            if m < 0.0 {
                report.state_violation = Some(StateViolation {
                    stage: (idx - 1) / grid.substeps,
                    tau,
                    kind: c.kind,
                    margin: m,
                });
                break 'outer;
            }
        }
    }
    let v = terminal_value(traj.final_state(), term)?;
    if v > term.eps_omega {
        report.terminal_violation = Some(v);
    }
    Ok(report)
}

/// Smallest margin per kind over a constraint list evaluated at `z`.
pub fn min_margins(constraints: &[ScalarConstraint], z: &[f64]) -> BTreeMap<ConstraintKind, f64> {
    let mut out = BTreeMap::new();
    for c in constraints {
        let m = c.margin(z);
        out.entry(c.kind)
            .and_modify(|v: &mut f64| *v = v.min(m))
            .or_insert(m);
    }
    out
}
