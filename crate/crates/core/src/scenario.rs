//! Scenario files: TOML description of the world, agents, weights and run
//! parameters, validated and materialized into a [`Simulation`].

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::constraints::{AgentGeometry, TerminalSet, WorldModel};
use crate::coordination::{neighbor_sets, validate_initial, AgentSpec, Simulation};
use crate::dynamics::{
    estimate_lipschitz, DisturbanceSignal, Dynamics, LinearModel, LipschitzRegion, RigidBody, Unicycle,
    DEFAULT_LIPSCHITZ_SAFETY,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ocp::{
    synthesize_terminal_gain, LinearFeedback, OcpConfig, PolarSteering, RelaxationSettings, SolverSettings,
    TerminalController,
};
use crate::setalg::Ball;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Unicycle,
    DoubleIntegrator { dim: usize },
    RigidBody { mass: f64, moments: [f64; 3], gravity: f64 },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentFile {
    pub id: usize,
    pub model: ModelSpec,
    pub radius: f64,
    pub sensing_range: f64,
    pub detection_range: f64,
    pub initial: Vec<f64>,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    Zero {
        bound: f64,
    },
    /// `amplitude · sin(frequency · t) · direction`, clipped to `bound`.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        direction: Vec<f64>,
        bound: f64,
    },
    /// Uniform samples from the `bound`-ball held over windows of `period`.
    Random { bound: f64, period: f64, seed: u64 },
}

impl DisturbanceSpec {
    pub fn bound(&self) -> f64 {
        match self {
            DisturbanceSpec::Zero { bound }
            | DisturbanceSpec::Sinusoid { bound, .. }
            | DisturbanceSpec::Random { bound, .. } => *bound,
        }
    }

    fn build(&self, dim: usize, horizon: f64, agent: usize) -> Result<DisturbanceSignal> {
        match self {
            DisturbanceSpec::Zero { bound } => DisturbanceSignal::zero(*bound),
            DisturbanceSpec::Sinusoid {
                amplitude,
                frequency,
                direction,
                bound,
            } => {
                if direction.len() != dim {
                    return Err(Error::Config(format!(
                        "disturbance direction has {} components, state has {dim}",
                        direction.len()
                    )));
                }
                DisturbanceSignal::sinusoid(*amplitude, *frequency, direction.clone(), *bound)
            }
            DisturbanceSpec::Random { bound, period, seed } => {
                DisturbanceSignal::piecewise_random(dim, *bound, *period, horizon, seed.wrapping_add(agent as u64))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsSpec {
    /// The same matrices for every agent, as row-major lists.
    Explicit {
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
    },
    /// Per agent `Q = q_scale·(I + mix·S)` and `P = p_scale·(I + mix·S)`
    /// where `S` is the symmetric part of a matrix with entries uniform in
    /// `[0, 1)` drawn from the scenario seed.
    RandomMix {
        q_scale: f64,
        p_scale: f64,
        mix: f64,
        r: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    pub eps_omega: f64,
    pub eps_psi: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    /// Lipschitz constant of the dynamics; estimated by sampling when absent.
    pub lipschitz_dynamics: Option<f64>,
    /// Lipschitz constant of the terminal cost.
    pub lipschitz_terminal: f64,
    /// Bound on the error norm over the state region; derived from the
    /// workspace when absent.
    pub sup_error: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub constraint_tol: Option<f64>,
    pub stationarity_tol: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub relaxation: Option<bool>,
    pub tail_weight: Option<f64>,
    pub terminal_weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub total_time: f64,
    pub sampling_period: f64,
    pub horizon: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub margin: f64,
    pub input_bound: f64,
    /// 1-based agent ids in execution order; ascending ids when absent.
    pub schedule: Option<Vec<usize>>,
    pub seed: u64,
    pub workspace: BallSpec,
    #[serde(default)]
    pub obstacles: Vec<BallSpec>,
    pub disturbance: DisturbanceSpec,
    pub weights: WeightsSpec,
    pub terminal: TerminalSpec,
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub agents: Vec<AgentFile>,
}

fn default_substeps() -> usize {
    10
}

/// Weights of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// A validated scenario with materialized weights and neighbor sets.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub weights: Vec<AgentWeights>,
    pub neighbors: Vec<Vec<usize>>,
    pub models: Vec<Arc<dyn Dynamics>>,
    /// Lipschitz constant of each agent's dynamics.
    pub lipschitz: Vec<f64>,
}

fn model_of(spec: &ModelSpec) -> Result<Arc<dyn Dynamics>> {
    Ok(match spec {
        ModelSpec::Unicycle => Arc::new(Unicycle),
        ModelSpec::DoubleIntegrator { dim } => {
            if *dim == 0 {
                return Err(Error::Config("double integrator dimension must be positive".into()));
            }
            Arc::new(LinearModel::double_integrator(*dim))
        }
        ModelSpec::RigidBody { mass, moments, gravity } => Arc::new(RigidBody::diagonal(*mass, *moments, *gravity)?),
    })
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let n_agents = file.agents.len();
        if n_agents == 0 {
            return Err(Error::Config("scenario has no agents".into()));
        }
        for (k, a) in file.agents.iter().enumerate() {
            if a.id != k + 1 {
                return Err(Error::Config(format!(
                    "agent ids must be 1, 2, … in file order; entry {} has id {}",
                    k + 1,
                    a.id
                )));
            }
        }
        if !(file.total_time > 0.0) {
            return Err(Error::Config("total_time must be positive".into()));
        }
        if !(file.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(file.input_bound > 0.0) {
            return Err(Error::Config("input_bound must be positive".into()));
        }
        crate::constraints::stage_count(file.sampling_period, file.horizon).map_err(config_err)?;
        let steps = file.total_time / file.sampling_period;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config("total_time must be a multiple of sampling_period".into()));
        }
        if file.terminal.eps_omega <= 0.0 || file.terminal.eps_omega >= file.terminal.eps_psi {
            return Err(Error::Config(format!(
                "terminal levels must satisfy 0 < eps_omega < eps_psi, got {} and {}",
                file.terminal.eps_omega, file.terminal.eps_psi
            )));
        }
        if file.disturbance.bound() < 0.0 {
            return Err(Error::Config("disturbance bound must be nonnegative".into()));
        }
        if let Some(s) = &file.schedule {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            if sorted != (1..=n_agents).collect::<Vec<_>>() {
                return Err(Error::Config(format!("schedule {s:?} is not a permutation of the agent ids")));
            }
        }

        let models = file
            .agents
            .iter()
            .map(|a| model_of(&a.model))
            .collect::<Result<Vec<_>>>()?;
        let dim = file.workspace.center.len();
        for (a, m) in file.agents.iter().zip(&models) {
            if a.initial.len() != m.state_dim() || a.goal.len() != m.state_dim() {
                return Err(Error::Config(format!(
                    "agent {} initial and goal states need {} components",
                    a.id,
                    m.state_dim()
                )));
            }
            if m.position_dim() != dim {
                return Err(Error::Config(format!(
                    "agent {} moves in {} dimensions, workspace has {dim}",
                    a.id,
                    m.position_dim()
                )));
            }
        }

        let weights = Self::materialize_weights(&file, &models)?;
        let positions: Vec<Vec<f64>> = file
            .agents
            .iter()
            .zip(&models)
            .map(|(a, m)| a.initial[..m.position_dim()].to_vec())
            .collect();
        let ranges: Vec<f64> = file.agents.iter().map(|a| a.sensing_range).collect();
        let neighbors = neighbor_sets(&positions, &ranges)?;

        let lipschitz = match file.certificate.lipschitz_dynamics {
            Some(l) if l > 0.0 => vec![l; n_agents],
            Some(l) => return Err(Error::Config(format!("lipschitz_dynamics must be positive, got {l}"))),
            None => models
                .iter()
                .map(|m| {
                    let region = Self::region(&file, m.as_ref());
                    estimate_lipschitz(m.as_ref(), &region, 4000, file.seed, DEFAULT_LIPSCHITZ_SAFETY)
                        .map(|l| l.max(1e-9))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if !(file.certificate.lipschitz_terminal > 0.0) {
            return Err(Error::Config("lipschitz_terminal must be positive".into()));
        }

        let sc = Self {
            file,
            weights,
            neighbors,
            models,
            lipschitz,
        };
        let world = sc.world()?;
        let report = validate_initial(&world, &sc.models, &sc.initial_states());
        if let Some(f) = report.failures.first() {
            return Err(Error::Config(format!(
                "initial configuration fails condition {} for agent {}: {}",
                f.condition, f.agent, f.detail
            )));
        }
        sc.check_goals(&world)?;
        Ok(sc)
    }

    fn materialize_weights(file: &ScenarioFile, models: &[Arc<dyn Dynamics>]) -> Result<Vec<AgentWeights>> {
        let mut rng = ChaCha8Rng::seed_from_u64(file.seed);
        let mut out = Vec::new();
        for (a, m) in file.agents.iter().zip(models) {
            let (n, nu) = (m.state_dim(), m.input_dim());
            let w = match &file.weights {
                WeightsSpec::Explicit { q, r, p } => AgentWeights {
                    q: linalg::matrix_from_rows(q).map_err(config_err)?,
                    r: linalg::matrix_from_rows(r).map_err(config_err)?,
                    p: linalg::matrix_from_rows(p).map_err(config_err)?,
                },
                WeightsSpec::RandomMix {
                    q_scale,
                    p_scale,
                    mix,
                    r,
                } => {
                    let s = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
                    let base = DMatrix::identity(n, n) + linalg::symmetrize(&s) * *mix;
                    AgentWeights {
                        q: &base * *q_scale,
                        r: linalg::matrix_from_rows(r).map_err(config_err)?,
                        p: &base * *p_scale,
                    }
                }
            };
            let shape_ok = w.q.shape() == (n, n) && w.p.shape() == (n, n) && w.r.shape() == (nu, nu);
            if !shape_ok {
                return Err(Error::Config(format!(
                    "agent {} weights must be {n}×{n} (Q, P) and {nu}×{nu} (R)",
                    a.id
                )));
            }
            linalg::check_positive_semidefinite("Q", &w.q).map_err(config_err)?;
            linalg::check_positive_definite("R", &w.r).map_err(config_err)?;
            linalg::check_positive_definite("P", &w.p).map_err(config_err)?;
            out.push(w);
        }
        Ok(out)
    }

    fn region(file: &ScenarioFile, m: &dyn Dynamics) -> LipschitzRegion {
        let n = m.state_dim();
        let pd = m.position_dim();
        let angles = m.angle_indices();
        let mut lo = vec![-file.input_bound; n];
        let mut hi = vec![file.input_bound; n];
        for i in 0..pd {
            lo[i] = file.workspace.center[i] - file.workspace.radius;
            hi[i] = file.workspace.center[i] + file.workspace.radius;
        }
        for &i in &angles {
            let lim = if Some(i) == m.pitch_index() {
                std::f64::consts::FRAC_PI_2 - file.margin
            } else {
                std::f64::consts::PI
            };
            lo[i] = -lim;
            hi[i] = lim;
        }
        LipschitzRegion {
            state_lo: lo,
            state_hi: hi,
            input_bound: file.input_bound,
        }
    }

    /// Goal configuration must be clear of other goals, obstacles and the
    /// workspace boundary, and keep every neighbor pair within range.
    fn check_goals(&self, world: &WorldModel) -> Result<()> {
        let eps = self.file.margin;
        let goals: Vec<&[f64]> = self
            .file
            .agents
            .iter()
            .zip(&self.models)
            .map(|(a, m)| &a.goal[..m.position_dim()])
            .collect();
        for (i, gi) in goals.iter().enumerate() {
            let ri = world.agents[i].radius;
            for (j, gj) in goals.iter().enumerate().skip(i + 1) {
                let d = linalg::distance(gi, gj);
                if d < ri + world.agents[j].radius + eps {
                    return Err(Error::Config(format!(
                        "goals of agents {} and {} overlap (distance {d})",
                        i + 1,
                        j + 1
                    )));
                }
            }
            for &j in &self.neighbors[i] {
                let d = linalg::distance(gi, goals[j]);
                if d > world.agents[i].sensing_range - eps {
                    return Err(Error::Config(format!(
                        "goals of neighbors {} and {} are {d} apart, beyond sensing range",
                        i + 1,
                        j + 1
                    )));
                }
            }
            for (l, o) in world.obstacles.iter().enumerate() {
                let d = linalg::distance(gi, o.center().as_slice());
                if d < ri + o.radius() + eps {
                    return Err(Error::Config(format!("goal of agent {} meets obstacle {}", i + 1, l + 1)));
                }
            }
            let d = linalg::distance(gi, world.workspace.center().as_slice());
            if d > world.workspace.radius() - ri - eps {
                return Err(Error::Config(format!("goal of agent {} leaves the workspace", i + 1)));
            }
            let m = &self.models[i];
            if m.check_state(&self.file.agents[i].goal).is_err() {
                return Err(Error::Config(format!("goal of agent {} is singular", i + 1)));
            }
        }
        Ok(())
    }

    pub fn w_bar(&self) -> f64 {
        self.file.disturbance.bound()
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.file.agents.iter().map(|a| a.initial.clone()).collect()
    }

    /// 0-based execution order.
    pub fn schedule(&self) -> Vec<usize> {
        match &self.file.schedule {
            Some(s) => s.iter().map(|i| i - 1).collect(),
            None => (0..self.file.agents.len()).collect(),
        }
    }

    pub fn world(&self) -> Result<WorldModel> {
        let ws = Ball::new(DVector::from_vec(self.file.workspace.center.clone()), self.file.workspace.radius)
            .map_err(config_err)?;
        let obstacles = self
            .file
            .obstacles
            .iter()
            .map(|o| Ball::from_slice(&o.center, o.radius).map_err(config_err))
            .collect::<Result<Vec<_>>>()?;
        let agents = self
            .file
            .agents
            .iter()
            .map(|a| AgentGeometry {
                radius: a.radius,
                sensing_range: a.sensing_range,
                detection_range: a.detection_range,
            })
            .collect();
        WorldModel::new(ws, obstacles, agents, self.file.margin, self.neighbors.clone())
    }

    pub fn terminal(&self, agent: usize) -> Result<TerminalSet> {
        TerminalSet::new(
            self.weights[agent].p.clone(),
            self.file.terminal.eps_omega,
            self.file.terminal.eps_psi,
        )
        .map_err(config_err)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        let s = &self.file.solver;
        let d = SolverSettings::default();
        let rd = RelaxationSettings::default();
        SolverSettings {
            constraint_tol: s.constraint_tol.unwrap_or(d.constraint_tol),
            stationarity_tol: s.stationarity_tol.unwrap_or(d.stationarity_tol),
            max_outer: s.max_outer.unwrap_or(d.max_outer),
            max_inner: s.max_inner.unwrap_or(d.max_inner),
            initial_penalty: d.initial_penalty,
            max_penalty: d.max_penalty,
            relaxation: RelaxationSettings {
                enabled: s.relaxation.unwrap_or(rd.enabled),
                tail_weight: s.tail_weight.unwrap_or(rd.tail_weight),
                terminal_weight: s.terminal_weight.unwrap_or(rd.terminal_weight),
            },
            diagnostics: d.diagnostics,
        }
    }

    pub fn ocp_config(&self, agent: usize) -> Result<OcpConfig> {
        let w = &self.weights[agent];
        let mut cfg = OcpConfig::new(
            self.file.sampling_period,
            self.file.horizon,
            w.q.clone(),
            w.r.clone(),
            self.terminal(agent)?,
            self.file.input_bound,
        )
        .map_err(config_err)?;
        cfg.substeps = self.file.substeps;
        cfg.solver = self.solver_settings();
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    /// Local controller for the terminal region: distance/bearing steering
    /// for unicycles, the linear-quadratic gain otherwise.
    pub fn terminal_controller(&self, agent: usize) -> Result<Arc<dyn TerminalController>> {
        let a = &self.file.agents[agent];
        if let ModelSpec::Unicycle = a.model {
            return Ok(Arc::new(PolarSteering::new(a.goal[2], self.file.input_bound)));
        }
        let m = &self.models[agent];
        let u_eq = equilibrium_input(m.as_ref(), &a.goal)?;
        let w = &self.weights[agent];
        let gain = synthesize_terminal_gain(m.as_ref(), &a.goal, &u_eq, &w.q, &w.r)?;
        Ok(Arc::new(LinearFeedback {
            k: gain.k,
            u_bar: self.file.input_bound,
        }))
    }

    pub fn agent_specs(&self) -> Result<Vec<AgentSpec>> {
        let n = self.file.agents.len();
        (0..n)
            .map(|i| {
                let a = &self.file.agents[i];
                let m = self.models[i].clone();
                Ok(AgentSpec {
                    id: a.id,
                    disturbance: self.file.disturbance.build(m.state_dim(), self.file.total_time, i)?,
                    initial: a.initial.clone(),
                    goal: a.goal.clone(),
                    ocp: self.ocp_config(i)?,
                    kappa: self.terminal_controller(i)?,
                    lipschitz: self.lipschitz[i],
                    model: m,
                })
            })
            .collect()
    }

    pub fn simulation(&self) -> Result<Simulation> {
        self.simulation_with_diagnostics(false)
    }

    /// Like [`Scenario::simulation`], optionally recording the solver's
    /// per-iteration diagnostics.
    pub fn simulation_with_diagnostics(&self, diagnostics: bool) -> Result<Simulation> {
        let mut specs = self.agent_specs()?;
        for s in &mut specs {
            s.ocp.solver.diagnostics = diagnostics;
        }
        let mut sim = Simulation::new(self.world()?, specs, self.schedule())?;
        sim.annotate("scenario", &self.file.name);
        sim.annotate("seed", self.file.seed);
        Ok(sim)
    }

    /// The same scenario with the weight seed replaced.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut file = self.file.clone();
        file.seed = seed;
        Self::from_file(file)
    }

    /// `sup ‖e‖` over the state region: the scenario value when given,
    /// otherwise the workspace diameter combined with the angle ranges for
    /// models without velocity states.
    pub fn sup_error(&self, agent: usize) -> Result<f64> {
        if let Some(s) = self.file.certificate.sup_error {
            return Ok(s);
        }
        let m = &self.models[agent];
        if m.velocity_range().is_some() || m.state_dim() != m.position_dim() + m.angle_indices().len() {
            return Err(Error::Config(
                "sup_error is required for models with velocity states".into(),
            ));
        }
        let diam = 2.0 * self.file.workspace.radius;
        let angles = m.angle_indices().len() as f64;
        Ok((diam * diam + angles * std::f64::consts::PI.powi(2)).sqrt())
    }
}

/// Input holding `z` at rest: least-squares solution of `f(z, 0) + B u = 0`
/// for input-affine models.
pub fn equilibrium_input(model: &dyn Dynamics, z: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (model.state_dim(), model.input_dim());
    let zero = vec![0.0; m];
    let mut f0 = vec![0.0; n];
    model.field(z, &zero, &mut f0)?;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * m];
    model.jacobians(z, &zero, &mut a, &mut b)?;
    let b = DMatrix::from_row_slice(n, m, &b);
    let rhs = -DVector::from_vec(f0);
    let u = b
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Parameter(format!("equilibrium input: {e}")))?;
    Ok(u.iter().copied().collect())
}
