//! Round-robin closed loop: sensing sets, the prediction board, and the
//! solve-then-apply step.
//!
//! Agents act one at a time in schedule order. While an agent executes its
//! first input over `[t_k, t_k + h]` of its own clock, every other agent is
//! held at its measured state. Beyond the executed interval an agent plans
//! against the latest predictions the others have posted on the board.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::constraints::{build_stage_constraints, min_margins, ConstraintKind, ScalarConstraint, WorldModel};
use crate::dynamics::{integrate, DisturbanceSignal, Dynamics, ErrorDynamics, ZohInput};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ocp::{
    kappa_rollout, solve_fhocp_with_guesses, warm_start_shift, ConstraintGrid, DiagnosticRow, HorizonSolution, OcpConfig, SolveStatus,
    TerminalController,
};
use crate::runlog::{kind_index, LogRow, TrajectoryLog};
use crate::setalg::TubeProfile;

/// Agents `j ≠ i` strictly closer than `range` to agent `i`.
pub fn sensing_set(i: usize, positions: &[Vec<f64>], range: f64) -> Vec<usize> {
    (0..positions.len())
        .filter(|&j| j != i && linalg::distance(&positions[i], &positions[j]) < range)
        .collect()
}

/// Sensing sets at the initial configuration, which stay fixed as neighbor
/// sets. Every agent must have at least one neighbor.
pub fn neighbor_sets(positions: &[Vec<f64>], ranges: &[f64]) -> Result<Vec<Vec<usize>>> {
    if positions.len() != ranges.len() {
        return Err(Error::DimensionMismatch {
            expected: positions.len(),
            got: ranges.len(),
        });
    }
    let sets: Vec<Vec<usize>> = (0..positions.len())
        .map(|i| sensing_set(i, positions, ranges[i]))
        .collect();
    if let Some(i) = sets.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "agent {} has no neighbor within its sensing range at t = 0",
            i + 1
        )));
    }
    Ok(sets)
}

/// A failed initial-configuration condition.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialFailure {
    /// 1: inter-agent clearance, 2: obstacle clearance, 3: workspace
    /// containment, 4: pitch away from the singularity, 5: zero velocity.
    pub condition: u8,
    pub agent: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitialReport {
    pub failures: Vec<InitialFailure>,
}

impl InitialReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn fails(&self, condition: u8) -> bool {
        self.failures.iter().any(|f| f.condition == condition)
    }
}

/// Checks that the configuration is collision- and singularity-free and
/// that every agent starts at rest.
pub fn validate_initial(world: &WorldModel, models: &[Arc<dyn Dynamics>], states: &[Vec<f64>]) -> InitialReport {
    let mut report = InitialReport::default();
    let mut fail = |condition: u8, agent: usize, detail: String| {
        report.failures.push(InitialFailure {
            condition,
            agent: agent + 1,
            detail,
        })
    };
    let pos: Vec<&[f64]> = models
        .iter()
        .zip(states)
        .map(|(m, z)| &z[..m.position_dim()])
        .collect();
    for i in 0..states.len() {
        let ri = world.agents[i].radius;
        for j in i + 1..states.len() {
            let d = linalg::distance(pos[i], pos[j]);
            let need = ri + world.agents[j].radius;
            if d <= need {
                fail(1, i, format!("distance {d} to agent {} is not above {need}", j + 1));
            }
        }
        for (l, o) in world.obstacles.iter().enumerate() {
            let d = linalg::distance(pos[i], o.center().as_slice());
            let need = ri + o.radius();
            if d <= need {
                fail(2, i, format!("distance {d} to obstacle {} is not above {need}", l + 1));
            }
        }
        let d = linalg::distance(pos[i], world.workspace.center().as_slice());
        if d > world.workspace.radius() - ri {
            fail(3, i, format!("body leaves the workspace (center distance {d})"));
        }
        if let Some(p) = models[i].pitch_index() {
            if models[i].check_state(&states[i]).is_err() {
                fail(4, i, format!("pitch {} is at the Euler-angle singularity", states[i][p]));
            }
        }
        if let Some(range) = models[i].velocity_range() {
            if states[i][range].iter().any(|v| *v != 0.0) {
                fail(5, i, "initial velocity is not zero".into());
            }
        }
    }
    report
}

/// One agent's closed-loop ingredients.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    /// 1-based id used in logs and messages.
    pub id: usize,
    pub model: Arc<dyn Dynamics>,
    pub initial: Vec<f64>,
    pub goal: Vec<f64>,
    pub ocp: OcpConfig,
    pub disturbance: DisturbanceSignal,
    pub kappa: Arc<dyn TerminalController>,
    /// Lipschitz constant of the dynamics used for the tube.
    pub lipschitz: f64,
}

impl AgentSpec {
    pub fn tube(&self) -> TubeProfile {
        TubeProfile {
            w_bar: self.disturbance.bound(),
            lipschitz: self.lipschitz,
        }
    }
}

/// An agent's latest posted plan.
#[derive(Debug, Clone, PartialEq)]
pub struct BoardEntry {
    pub issued_at: f64,
    pub measured: Vec<f64>,
    /// Predicted positions at `issued_at + j·dt`.
    pub positions: Vec<Vec<f64>>,
    pub dt: f64,
    /// `None` for the bootstrap hold prediction.
    pub solution: Option<HorizonSolution>,
}

impl BoardEntry {
    pub fn hold(issued_at: f64, measured: Vec<f64>, position_dim: usize, horizon: f64, dt: f64) -> Self {
        let count = (horizon / dt).round() as usize;
        let p = measured[..position_dim].to_vec();
        Self {
            issued_at,
            positions: vec![p; count + 1],
            measured,
            dt,
            solution: None,
        }
    }

    /// Position at absolute time `t`: linear interpolation on the prediction
    /// grid, held at the ends.
    pub fn position_at(&self, t: f64) -> Vec<f64> {
        let s = ((t - self.issued_at) / self.dt).max(0.0);
        let last = self.positions.len() - 1;
        if s >= last as f64 {
            return self.positions[last].clone();
        }
        let j = s.floor() as usize;
        let a = s - j as f64;
        if a < 1e-12 {
            return self.positions[j].clone();
        }
        self.positions[j]
            .iter()
            .zip(&self.positions[j + 1])
            .map(|(p, q)| p + a * (q - p))
            .collect()
    }
}

/// Latest plan of every agent. Entries are replaced whole, never edited.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionBoard {
    entries: Vec<BoardEntry>,
}

impl PredictionBoard {
    pub fn new(entries: Vec<BoardEntry>) -> Self {
        Self { entries }
    }

    pub fn post(&mut self, agent: usize, entry: BoardEntry) {
        self.entries[agent] = entry;
    }

    pub fn entry(&self, agent: usize) -> &BoardEntry {
        &self.entries[agent]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Solver diagnostics tagged with their solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub step: usize,
    pub agent: usize,
    pub rows: Vec<DiagnosticRow>,
}

/// A closed-loop run in progress.
#[derive(Debug)]
pub struct Simulation {
    world: WorldModel,
    agents: Vec<AgentSpec>,
    errors: Vec<ErrorDynamics>,
    schedule: Vec<usize>,
    states: Vec<Vec<f64>>,
    board: PredictionBoard,
    known_obstacles: Vec<BTreeSet<usize>>,
    warm: Vec<Option<Vec<Vec<f64>>>>,
    step: usize,
    log: TrajectoryLog,
    diagnostics: Vec<SolveDiagnostics>,
}

/// Everything a run produced, including the error that stopped it early.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: TrajectoryLog,
    pub diagnostics: Vec<SolveDiagnostics>,
    pub error: Option<Error>,
    pub final_states: Vec<Vec<f64>>,
}

impl Simulation {
    /// `schedule` lists 0-based agent indices in execution order.
    pub fn new(world: WorldModel, agents: Vec<AgentSpec>, schedule: Vec<usize>) -> Result<Self> {
        if agents.len() != world.agents.len() {
            return Err(Error::Config("world and agent list sizes differ".into()));
        }
        let mut sorted = schedule.clone();
        sorted.sort_unstable();
        if sorted != (0..agents.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "schedule must be a permutation of the agents, got {:?}",
                schedule.iter().map(|i| i + 1).collect::<Vec<_>>()
            )));
        }
        let models: Vec<Arc<dyn Dynamics>> = agents.iter().map(|a| a.model.clone()).collect();
        let states: Vec<Vec<f64>> = agents.iter().map(|a| a.initial.clone()).collect();
        let report = validate_initial(&world, &models, &states);
        if let Some(f) = report.failures.first() {
            return Err(Error::Config(format!(
                "initial configuration fails condition {} for agent {}: {}",
                f.condition, f.agent, f.detail
            )));
        }
        let first = &agents[0];
        let (ns, nu) = (first.model.state_dim(), first.model.input_dim());
        if agents.iter().any(|a| a.model.state_dim() != ns || a.model.input_dim() != nu) {
            return Err(Error::Config("all agents must share state and input dimensions".into()));
        }
        let errors = agents
            .iter()
            .map(|a| ErrorDynamics::new(a.model.clone(), a.goal.clone()))
            .collect::<Result<Vec<_>>>()?;
        let board = PredictionBoard::new(
            agents
                .iter()
                .map(|a| BoardEntry::hold(0.0, a.initial.clone(), a.model.position_dim(), a.ocp.horizon, a.ocp.dt()))
                .collect(),
        );
        let mut log = TrajectoryLog::new(first.model.state_labels(), first.model.input_labels());
        log.metadata.push(("interpolation".into(), "linear".into()));
        log.metadata.push(("time".into(), "agent_clock".into()));
        log.metadata.push((
            "schedule".into(),
            schedule.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(" "),
        ));
        let mut sim = Self {
            known_obstacles: vec![BTreeSet::new(); agents.len()],
            warm: vec![None; agents.len()],
            world,
            errors,
            schedule,
            states,
            board,
            step: 0,
            log,
            diagnostics: Vec::new(),
            agents,
        };
        for i in 0..sim.agents.len() {
            let z = sim.states[i].clone();
            sim.detect(i, &z);
        }
        Ok(sim)
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    /// Adds a `key = value` metadata entry to the log header.
    pub fn annotate(&mut self, key: &str, value: impl ToString) {
        self.log.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn board(&self) -> &PredictionBoard {
        &self.board
    }

    pub fn world(&self) -> &WorldModel {
        &self.world
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    fn position(&self, i: usize) -> &[f64] {
        &self.states[i][..self.agents[i].model.position_dim()]
    }

    fn detect(&mut self, i: usize, z: &[f64]) {
        let p = &z[..self.agents[i].model.position_dim()];
        for l in 0..self.world.obstacles.len() {
            if self.world.detects(i, p, l) {
                self.known_obstacles[i].insert(l);
            }
        }
    }

    /// Agents that can reach collision range within one sampling period.
    fn collision_candidates(&self, i: usize) -> Vec<usize> {
        let a = &self.agents[i];
        let reach = self.world.agents[i].sensing_range + a.ocp.input_bound * a.ocp.h;
        let positions: Vec<Vec<f64>> = (0..self.agents.len()).map(|j| self.position(j).to_vec()).collect();
        sensing_set(i, &positions, reach)
    }

    /// Untightened constraints of agent `i` against the true current world.
    fn true_constraints(&self, i: usize, others: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<ScalarConstraint>> {
        let all: Vec<usize> = (0..self.agents.len()).filter(|&j| j != i).collect();
        let obstacles: Vec<usize> = (0..self.world.obstacles.len()).collect();
        build_stage_constraints(i, &self.world, &all, others, &obstacles, self.agents[i].model.pitch_index())
    }

    /// Solves and executes one sampling interval for agent `i`.
    fn act(&mut self, i: usize, rows: &mut Vec<LogRow>) -> Result<()> {
        let spec = self.agents[i].clone();
        let h = spec.ocp.h;
        let t_k = self.step as f64 * h;
        let z = self.states[i].clone();
        self.detect(i, &z);

        let candidates = self.collision_candidates(i);
        let measured: BTreeMap<usize, Vec<f64>> = (0..self.agents.len())
            .filter(|&j| j != i)
            .map(|j| (j, self.position(j).to_vec()))
            .collect();
        let known: Vec<usize> = self.known_obstacles[i].iter().copied().collect();
        let world = &self.world;
        let board = &self.board;
        let pitch = spec.model.pitch_index();
        let builder = |tau: f64| -> Result<Vec<ScalarConstraint>> {
            let others: BTreeMap<usize, Vec<f64>> = if tau <= h + 1e-12 {
                measured.clone()
            } else {
                measured
                    .keys()
                    .map(|&j| (j, board.entry(j).position_at(t_k + tau)))
                    .collect()
            };
            build_stage_constraints(i, world, &candidates, &others, &known, pitch)
        };
        let grid = ConstraintGrid::build(&builder, spec.tube(), &spec.ocp)?;

        let err = self.errors[i].clone();
        let e0 = err.error_of(&z);
        let steer = kappa_rollout(&err, &e0, spec.kappa.as_ref(), &spec.ocp)?;
        let sol = solve_fhocp_with_guesses(&err, &e0, &grid, &spec.ocp, self.warm[i].as_deref(), &[steer])?;
        if !sol.diagnostics.is_empty() {
            self.diagnostics.push(SolveDiagnostics {
                step: self.step,
                agent: spec.id,
                rows: sol.diagnostics.clone(),
            });
        }
        if sol.status == SolveStatus::Infeasible {
            let (kind, margin) = sol.worst_margin.unwrap_or((ConstraintKind::Workspace, f64::NAN));
            return Err(Error::Infeasible {
                agent: spec.id,
                time: t_k,
                kind,
                margin,
            });
        }
        if let Some(rel) = &sol.relaxation {
            log::debug!(
                "agent {} t={t_k:.2}: relaxed solve (tail violation {:.3e}, terminal excess {:.3e})",
                spec.id,
                rel.tail_violation,
                rel.terminal_excess
            );
        }

        // post the plan
        let pd = spec.model.position_dim();
        let positions: Vec<Vec<f64>> = sol
            .dense_errors
            .iter()
            .map(|e| e[..pd].iter().zip(&spec.goal).map(|(a, b)| a + b).collect())
            .collect();
        self.board.post(
            i,
            BoardEntry {
                issued_at: t_k,
                measured: z.clone(),
                positions,
                dt: sol.dense_step,
                solution: Some(sol.clone()),
            },
        );
        self.warm[i] = Some(warm_start_shift(&sol, spec.kappa.as_ref()));

        // execute the first input on the disturbed model
        let u0 = sol.inputs[0].clone();
        let traj = integrate(
            spec.model.as_ref(),
            &z,
            &ZohInput::constant(u0.clone()),
            Some(&spec.disturbance),
            t_k,
            t_k + h,
            spec.ocp.dt(),
        )?;
        let int_e2 = sol.first_stage_error_energy(spec.ocp.substeps);
        for (sub, zs) in traj.states.iter().enumerate() {
            let cons = self.true_constraints(i, &measured)?;
            let mm = min_margins(&cons, zs);
            let mut margins = [f64::INFINITY; 5];
            for (k, v) in mm {
                margins[kind_index(k)] = v;
            }
            let e = err.error_of(zs);
            rows.push(LogRow {
                step: self.step,
                sub,
                t: traj.times[sub],
                agent: spec.id,
                state: zs.clone(),
                input: u0.clone(),
                w_norm: traj.disturbance_norms[sub],
                v: linalg::quad_form(&spec.ocp.terminal.p, &e),
                margins,
                status: sol.status,
                relaxed: sol.relaxation.is_some(),
                cost: sol.cost,
                int_e2,
            });
            self.detect(i, zs);
        }
        self.states[i] = traj.final_state().to_vec();
        Ok(())
    }

    /// Runs one round: every agent in schedule order solves and executes.
    /// Rows of agents that completed before an error are kept in the log.
    pub fn step(&mut self) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        let mut result = Ok(());
        for idx in 0..self.schedule.len() {
            let i = self.schedule[idx];
            if let Err(e) = self.act(i, &mut rows) {
                result = Err(e);
                break;
            }
        }
        self.log.rows.extend(rows.iter().cloned());
        result?;
        self.step += 1;
        Ok(rows)
    }

    /// Steps until every agent's clock reaches `total_time`. `on_step`
    /// receives each round's rows as they are produced.
    pub fn run(mut self, total_time: f64, mut on_step: impl FnMut(&[LogRow]) -> Result<()>) -> RunOutcome {
        let h = self.agents[0].ocp.h;
        let steps = (total_time / h).round() as usize;
        let mut error = None;
        while self.step < steps {
            let before = self.log.rows.len();
            let res = self.step();
            if let Err(e) = on_step(&self.log.rows[before..]) {
                error = Some(e);
                break;
            }
            if let Err(e) = res {
                log::error!("run stopped at step {}: {e}", self.step);
                error = Some(e);
                break;
            }
        }
        RunOutcome {
            log: self.log,
            diagnostics: self.diagnostics,
            error,
            final_states: self.states,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensing_is_strict() {
        let p = vec![vec![0.0, 0.0], vec![1.9, 0.0], vec![0.0, 2.0]];
        assert_eq!(sensing_set(0, &p, 2.0), vec![1]);
        assert!(sensing_set(0, &[vec![0.0, 0.0]], 2.0).is_empty());
    }

    #[test]
    fn neighbor_sets_of_a_column() {
        let p = vec![vec![-6.0, 3.5], vec![-6.0, 2.3], vec![-6.0, 4.7]];
        let n = neighbor_sets(&p, &[2.0; 3]).unwrap();
        assert_eq!(n, vec![vec![1, 2], vec![0], vec![0]]);
        let far = vec![vec![0.0, 0.0], vec![5.0, 0.0]];
        assert!(matches!(neighbor_sets(&far, &[2.0; 2]), Err(Error::Config(_))));
        let pair = vec![vec![0.0, 0.0], vec![1.5, 0.0]];
        assert_eq!(neighbor_sets(&pair, &[2.0; 2]).unwrap(), vec![vec![1], vec![0]]);
    }

    #[test]
    fn board_interpolates_and_holds() {
        let e = BoardEntry {
            issued_at: 1.0,
            measured: vec![0.0, 0.0, 0.0],
            positions: vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 2.0]],
            dt: 0.1,
            solution: None,
        };
        assert_eq!(e.position_at(0.5), vec![0.0, 0.0]);
        let mid = e.position_at(1.05);
        assert!((mid[0] - 0.5).abs() < 1e-12 && (mid[1] - 1.0).abs() < 1e-12);
        assert_eq!(e.position_at(5.0), vec![2.0, 2.0]);
    }
}
