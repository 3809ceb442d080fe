//! Certificate arithmetic and verification of logged closed-loop runs.

use nalgebra::DMatrix;

use crate::constraints::{build_stage_constraints, ConstraintKind};
use crate::dynamics::ErrorDynamics;
use crate::error::{Error, Result};
use crate::linalg;
use crate::ocp::SolveStatus;
use crate::runlog::{LogRow, TrajectoryLog};
use crate::scenario::Scenario;

/// Tolerance of the V-trapping and V-monotonicity comparisons.
pub const V_TOL: f64 = 1e-9;
/// Tolerance of the per-step cost-decrease inequality.
pub const ISS_TOL: f64 = 1e-6;
/// Relative band of the terminal-cost Lipschitz cross-check.
pub const LV_BAND: f64 = 0.2;

/// `2 σ_max(M) sup‖e‖`, the Lipschitz constant of `eᵀMe` over a ball.
pub fn lipschitz_of_cost(m: &DMatrix<f64>, sup_e: f64) -> Result<f64> {
    if !(sup_e > 0.0) {
        return Err(Error::Parameter(format!("sup of the error must be positive, got {sup_e}")));
    }
    Ok(2.0 * linalg::sigma_max(m) * sup_e)
}

/// Largest disturbance bound for which a terminal state reached in `Ω` by the
/// nominal prediction stays in `Ψ` under the true dynamics.
pub fn disturbance_bound(eps_psi: f64, eps_omega: f64, l_v: f64, l_g: f64, h: f64, t_p: f64) -> Result<f64> {
    if !(eps_psi >= eps_omega && eps_omega > 0.0) {
        return Err(Error::Parameter(format!(
            "need ε_Ψ ≥ ε_Ω > 0, got ε_Ψ = {eps_psi}, ε_Ω = {eps_omega}"
        )));
    }
    if !(l_v > 0.0 && l_g > 0.0) {
        return Err(Error::Parameter(format!(
            "Lipschitz constants must be positive, got L_V = {l_v}, L_g = {l_g}"
        )));
    }
    if !(h > 0.0 && h < t_p) {
        return Err(Error::Parameter(format!("need 0 < h < T_p, got h = {h}, T_p = {t_p}")));
    }
    let growth = (l_v / l_g) * (l_g * h).exp_m1() * (l_g * (t_p - h)).exp();
    Ok((eps_psi - eps_omega) / growth)
}

/// `√(ε_Ω / λ)`: with `λ = λ_max(P)` the radius of the largest ball inside
/// `Ω`, with `λ = λ_min(P)` the radius of the smallest ball containing it.
pub fn ultimate_bound(eps_omega: f64, lambda: f64) -> Result<f64> {
    if !(eps_omega > 0.0 && lambda > 0.0) {
        return Err(Error::Parameter(format!(
            "ε_Ω and the eigenvalue must be positive, got {eps_omega} and {lambda}"
        )));
    }
    Ok((eps_omega / lambda).sqrt())
}

/// Disturbance gain of the per-step cost decrease.
pub fn xi(l_g: f64, l_f: f64, l_v: f64, h: f64, t_p: f64) -> Result<f64> {
    if !(l_g > 0.0 && l_f >= 0.0 && l_v >= 0.0) {
        return Err(Error::Parameter("Lipschitz constants must be nonnegative with L_g > 0".into()));
    }
    if !(h > 0.0 && h < t_p) {
        return Err(Error::Parameter(format!("need 0 < h < T_p, got h = {h}, T_p = {t_p}")));
    }
    Ok((l_g * h).exp_m1() / l_g * ((l_v + l_f / l_g) * (l_g * (t_p - h)).exp_m1() + l_v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCertificate {
    /// 1-based agent id.
    pub agent: usize,
    pub l_g: f64,
    pub l_f: f64,
    /// Terminal-cost Lipschitz constant used by the bound.
    pub l_v: f64,
    /// `2 σ_max(P) sup‖e‖` for comparison with `l_v`.
    pub l_v_formula: f64,
    pub sup_error: f64,
    pub w_max: f64,
    pub xi: f64,
    /// Decrease rate `min(λ_min(Q), λ_min(R))`.
    pub decrease_rate: f64,
    pub lambda_max_p: f64,
    pub lambda_min_p: f64,
    pub radius_lambda_max: f64,
    pub radius_lambda_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub w_bar: f64,
    pub agents: Vec<AgentCertificate>,
}

impl Certificate {
    pub fn from_scenario(sc: &Scenario) -> Result<Self> {
        let f = &sc.file;
        let w_bar = sc.w_bar();
        let agents = (0..f.agents.len())
            .map(|i| {
                let w = &sc.weights[i];
                let sup_error = sc.sup_error(i)?;
                let l_g = sc.lipschitz[i];
                let l_f = lipschitz_of_cost(&w.q, sup_error)?;
                let l_v = f.certificate.lipschitz_terminal;
                let lambda_max_p = linalg::lambda_max(&w.p);
                let lambda_min_p = linalg::lambda_min(&w.p);
                Ok(AgentCertificate {
                    agent: f.agents[i].id,
                    l_g,
                    l_f,
                    l_v,
                    l_v_formula: lipschitz_of_cost(&w.p, sup_error)?,
                    sup_error,
                    w_max: disturbance_bound(
                        f.terminal.eps_psi,
                        f.terminal.eps_omega,
                        l_v,
                        l_g,
                        f.sampling_period,
                        f.horizon,
                    )?,
                    xi: xi(l_g, l_f, l_v, f.sampling_period, f.horizon)?,
                    decrease_rate: linalg::lambda_min(&w.q).min(linalg::lambda_min(&w.r)),
                    lambda_max_p,
                    lambda_min_p,
                    radius_lambda_max: ultimate_bound(f.terminal.eps_omega, lambda_max_p)?,
                    radius_lambda_min: ultimate_bound(f.terminal.eps_omega, lambda_min_p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { w_bar, agents })
    }

    /// `w̄ ≤ w_max` for every agent.
    pub fn consistent(&self) -> bool {
        self.agents.iter().all(|a| self.w_bar <= a.w_max)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("w_bar".to_string(), self.w_bar.to_string()),
            ("consistent".to_string(), self.consistent().to_string()),
        ];
        for a in &self.agents {
            let p = format!("agent{}", a.agent);
            for (k, v) in [
                ("l_g", a.l_g),
                ("l_f", a.l_f),
                ("l_v", a.l_v),
                ("l_v_formula", a.l_v_formula),
                ("sup_error", a.sup_error),
                ("w_max", a.w_max),
                ("xi", a.xi),
                ("decrease_rate", a.decrease_rate),
                ("lambda_max_p", a.lambda_max_p),
                ("lambda_min_p", a.lambda_min_p),
                ("ultimate_radius", a.radius_lambda_max),
                ("ultimate_radius_lambda_min", a.radius_lambda_min),
            ] {
                kv.push((format!("{p}.{k}"), v.to_string()));
            }
            kv.push((format!("{p}.admissible"), (self.w_bar <= a.w_max).to_string()));
        }
        kv
    }
}

/// One verified property with its worst case.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// False when the property does not apply to the run; it then passes.
    pub applicable: bool,
    pub passed: bool,
    /// Worst signed margin, nonnegative when satisfied.
    pub worst: f64,
    pub time: f64,
    /// 1-based agent attaining the worst margin.
    pub agent: Option<usize>,
    pub samples: usize,
    pub detail: String,
}

impl Check {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            applicable: true,
            passed: true,
            worst: f64::INFINITY,
            time: f64::NAN,
            agent: None,
            samples: 0,
            detail: String::new(),
        }
    }

    fn observe(&mut self, margin: f64, time: f64, agent: usize) {
        self.samples += 1;
        if margin < self.worst || self.agent.is_none() {
            self.worst = margin;
            self.time = time;
            self.agent = Some(agent);
        }
        if margin < 0.0 || margin.is_nan() {
            self.passed = false;
        }
    }

    fn not_applicable(mut self, why: &str) -> Self {
        self.applicable = false;
        self.passed = true;
        self.detail = why.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    /// Checks reported without affecting the verdict.
    pub informational: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().chain(&self.informational).find(|c| c.name == name)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("pass".to_string(), self.passed().to_string())];
        for c in self.checks.iter().chain(&self.informational) {
            let n = &c.name;
            kv.push((format!("{n}.pass"), c.passed.to_string()));
            kv.push((format!("{n}.applicable"), c.applicable.to_string()));
            kv.push((format!("{n}.worst"), c.worst.to_string()));
            kv.push((format!("{n}.time"), c.time.to_string()));
            kv.push((
                format!("{n}.agent"),
                c.agent.map(|a| a.to_string()).unwrap_or_else(|| "none".into()),
            ));
            kv.push((format!("{n}.samples"), c.samples.to_string()));
            if !c.detail.is_empty() {
                kv.push((format!("{n}.detail"), c.detail.clone()));
            }
        }
        kv
    }
}

/// Formats `key = value` lines.
pub fn format_kv(kv: &[(String, String)]) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Checks a logged run against the problem specifications.
///
/// Positions are replayed from the initial configuration in log order, so
/// every substep row is checked against the other agents' positions at that
/// moment of the turn-based execution.
pub fn verify(log: &TrajectoryLog, sc: &Scenario) -> Result<VerificationReport> {
    let world = sc.world()?;
    let f = &sc.file;
    let n_agents = f.agents.len();
    let index_of = |agent: usize| -> Result<usize> {
        f.agents
            .iter()
            .position(|a| a.id == agent)
            .ok_or_else(|| Error::Config(format!("log refers to unknown agent {agent}")))
    };
    let cert = Certificate::from_scenario(sc)?;
    let errors: Vec<ErrorDynamics> = (0..n_agents)
        .map(|i| ErrorDynamics::new(sc.models[i].clone(), f.agents[i].goal.clone()))
        .collect::<Result<_>>()?;

    let mut positions: Vec<Vec<f64>> = (0..n_agents)
        .map(|i| f.agents[i].initial[..sc.models[i].position_dim()].to_vec())
        .collect();
    let mut kinds: Vec<Check> = ConstraintKind::ALL
        .iter()
        .map(|k| Check::new(k.label()))
        .collect();
    let mut input = Check::new("input_bound");
    let mut status = Check::new("solver_status");
    let all_obstacles: Vec<usize> = (0..world.obstacles.len()).collect();
    for row in &log.rows {
        let i = index_of(row.agent)?;
        let pd = sc.models[i].position_dim();
        if row.state.len() < pd {
            return Err(Error::Config(format!("row of agent {} has too few state entries", row.agent)));
        }
        positions[i] = row.state[..pd].to_vec();
        let others: std::collections::BTreeMap<usize, Vec<f64>> = (0..n_agents)
            .filter(|&j| j != i)
            .map(|j| (j, positions[j].clone()))
            .collect();
        let sensing: Vec<usize> = others.keys().copied().collect();
        let cons = build_stage_constraints(i, &world, &sensing, &others, &all_obstacles, sc.models[i].pitch_index())?;
        for c in &cons {
            let k = ConstraintKind::ALL.iter().position(|x| *x == c.kind).expect("kind listed");
            kinds[k].observe(c.margin(&row.state), row.t, row.agent);
        }
        input.observe(f.input_bound - linalg::norm(&row.input), row.t, row.agent);
        status.observe(
            if row.status == SolveStatus::Infeasible { -1.0 } else { 0.0 },
            row.t,
            row.agent,
        );
    }
    if !sc.models.iter().any(|m| m.pitch_index().is_some()) {
        let k = ConstraintKind::ALL.iter().position(|x| *x == ConstraintKind::Pitch).expect("kind listed");
        kinds[k] = Check::new("pitch").not_applicable("no model has a pitch angle");
    }

    let mut convergence = Check::new("convergence");
    let mut trapping = Check::new("v_trapping");
    let mut monotone = Check::new("v_monotone");
    let mut iss = Check::new("iss_decrease");
    let mut lv = Check::new("l_v_cross_check");
    let mut complete = Check::new("complete");
    let duration = log.meta("duration").and_then(|v| v.parse::<f64>().ok());
    let mut sup_e = vec![0.0f64; n_agents];

    for i in 0..n_agents {
        let id = f.agents[i].id;
        let c = &cert.agents[i];
        let p = &sc.weights[i].p;
        let rows: Vec<&LogRow> = log.agent_rows(id).collect();
        let Some(last) = rows.last() else {
            complete.observe(-1.0, 0.0, id);
            continue;
        };
        if let Some(d) = duration {
            complete.observe(last.t - (d - 1e-9 * (1.0 + d.abs())), last.t, id);
        }
        let e_last = errors[i].error_of(&last.state);
        convergence.observe(c.radius_lambda_min - linalg::norm(&e_last), last.t, id);

        let mut entered = false;
        for r in &rows {
            let e = errors[i].error_of(&r.state);
            sup_e[i] = sup_e[i].max(linalg::norm(&e));
            let v = linalg::quad_form(p, &e);
            if !entered && v <= f.terminal.eps_omega {
                entered = true;
            }
            if entered {
                trapping.observe(f.terminal.eps_omega + V_TOL - v, r.t, id);
            }
        }
        if !entered {
            trapping.observe(f.terminal.eps_omega - linalg::quad_form(p, &e_last), last.t, id);
        }

        let solves: Vec<&LogRow> = rows.iter().copied().filter(|r| r.sub == 0).collect();
        for pair in solves.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.step != a.step + 1 {
                continue;
            }
            let va = linalg::quad_form(p, &errors[i].error_of(&a.state));
            let vb = linalg::quad_form(p, &errors[i].error_of(&b.state));
            monotone.observe(va + V_TOL - vb, b.t, id);
            let bound = c.xi * cert.w_bar - c.decrease_rate * a.int_e2;
            iss.observe(bound + ISS_TOL - (b.cost - a.cost), b.t, id);
        }
    }
    if duration.is_none() {
        complete = complete.not_applicable("log carries no duration metadata");
    }
    if cert.w_bar > 0.0 {
        monotone = monotone.not_applicable("only asserted without disturbance");
    }
    for i in 0..n_agents {
        let c = &cert.agents[i];
        let observed = lipschitz_of_cost(&sc.weights[i].p, sup_e[i].max(f64::MIN_POSITIVE))?;
        let rel = (c.l_v - observed) / observed;
        lv.observe(LV_BAND - rel.abs(), f64::NAN, c.agent);
    }
    lv.detail = "2 σ_max(P) sup‖e‖ over the log against the scenario value".into();

    let mut checks = vec![convergence];
    checks.extend(kinds);
    checks.extend([input, status, trapping, monotone, iss, complete]);
    Ok(VerificationReport {
        checks,
        informational: vec![lv],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_lipschitz_examples() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(lipschitz_of_cost(&eye, 1.0).unwrap(), 2.0);
        assert_eq!(lipschitz_of_cost(&eye, 2.0).unwrap(), 4.0);
        assert!(lipschitz_of_cost(&eye, 0.0).is_err());
    }

    #[test]
    fn ultimate_bound_examples() {
        assert_eq!(ultimate_bound(4.0, 1.0).unwrap(), 2.0);
        assert!(ultimate_bound(0.0, 1.0).is_err());
        assert!(ultimate_bound(1.0, -1.0).is_err());
    }

    #[test]
    fn disturbance_bound_edges() {
        assert_eq!(disturbance_bound(0.1, 0.1, 0.05, 8.0, 0.1, 0.6).unwrap(), 0.0);
        assert!(disturbance_bound(0.01, 0.1, 0.05, 8.0, 0.1, 0.6).is_err());
        assert!(disturbance_bound(0.1, 0.01, 0.05, 8.0, 0.6, 0.6).is_err());
        let short = disturbance_bound(0.1, 0.01, 0.05, 8.0, 0.1, 0.6).unwrap();
        let long = disturbance_bound(0.1, 0.01, 0.05, 8.0, 0.1, 0.7).unwrap();
        assert!(long < short);
    }

    #[test]
    fn disturbance_bound_saturates_terminal_growth() {
        let (eps_psi, eps_omega, l_v, l_g, h, t_p) = (0.0582, 0.0035, 0.0471, 8.5883, 0.1, 0.6);
        let w = disturbance_bound(eps_psi, eps_omega, l_v, l_g, h, t_p).unwrap();
        let reached = eps_omega + l_v * (w / l_g) * (l_g * h).exp_m1() * (l_g * (t_p - h)).exp();
        assert!((reached - eps_psi).abs() < 1e-12);
    }
}
