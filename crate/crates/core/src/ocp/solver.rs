//! Direct single shooting with exact forward sensitivities, an
//! augmented-Lagrangian outer loop and a projected quasi-Newton inner loop.

use std::time::Instant;

use nalgebra::DMatrix;

use super::{
    ConstraintGrid, DiagnosticRow, GridMode, HorizonSolution, OcpConfig, Relaxation, SolveStats, SolveStatus,
};
use crate::constraints::{ConstraintKind, ScalarConstraint};
use crate::dynamics::{Dynamics, ErrorDynamics};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

struct Entry {
    /// Integration point index, `1..=K`.
    point: usize,
    c: ScalarConstraint,
}

struct Problem<'a> {
    model: &'a dyn Dynamics,
    z_des: &'a [f64],
    z0: Vec<f64>,
    n: usize,
    m: usize,
    stages: usize,
    sub: usize,
    dt: f64,
    h: f64,
    q: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    p: &'a DMatrix<f64>,
    eps_omega: f64,
    u_bar: f64,
    hard: Vec<Entry>,
    soft: Vec<Entry>,
    terminal_hard: bool,
    tail_weight: f64,
    terminal_weight: f64,
    /// Weight of the cost and terminal penalty in the merit; below one
    /// during feasibility restoration.
    objective_scale: f64,
}

struct Work {
    states: Vec<f64>,
    sens: Vec<f64>,
    cot: Vec<f64>,
    k: [Vec<f64>; 4],
    a: [Vec<f64>; 4],
    b: [Vec<f64>; 4],
    dk: [Vec<f64>; 4],
    node: Vec<f64>,
    snode: Vec<f64>,
    cgrad: Vec<f64>,
    egrad: Vec<f64>,
    e: Vec<f64>,
}

impl Work {
    fn new(n: usize, m: usize, points: usize, nu: usize) -> Self {
        let v = |len: usize| vec![0.0; len];
        Self {
            states: v((points + 1) * n),
            sens: v((points + 1) * n * nu),
            cot: v((points + 1) * n),
            k: [v(n), v(n), v(n), v(n)],
            a: [v(n * n), v(n * n), v(n * n), v(n * n)],
            b: [v(n * m), v(n * m), v(n * m), v(n * m)],
            dk: [v(n * nu), v(n * nu), v(n * nu), v(n * nu)],
            node: v(n),
            snode: v(n * nu),
            cgrad: v(n),
            egrad: v(n),
            e: v(n),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Eval {
    merit: f64,
}

/// Thrown by a rollout that enters a region where the model is undefined;
/// the line search treats such trial points as infinitely bad.
fn is_domain_error(e: &Error) -> bool {
    matches!(e, Error::Singularity { .. } | Error::SingularTrajectory { .. })
}

impl<'a> Problem<'a> {
    fn nu(&self) -> usize {
        self.stages * self.m
    }

    fn points(&self) -> usize {
        self.stages * self.sub
    }

    fn project(&self, x: &mut [f64]) {
        for u in x.chunks_mut(self.m) {
            let nrm = linalg::norm(u);
            if nrm > self.u_bar {
                let s = self.u_bar / nrm;
                u.iter_mut().for_each(|v| *v *= s);
                // rounding can leave the scaled norm a few ulps outside
                while linalg::norm(u) > self.u_bar {
                    u.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
                }
            }
        }
    }

    fn rollout(&self, x: &[f64], w: &mut Work, with_sens: bool) -> Result<()> {
        let (n, m, nu) = (self.n, self.m, self.nu());
        let dt = self.dt;
        w.states[..n].copy_from_slice(&self.z0);
        if with_sens {
            w.sens.fill(0.0);
        }
        let nodes = [0.0, 0.5, 0.5, 1.0];
        for j in 0..self.points() {
            let s = j / self.sub;
            let u = &x[s * m..(s + 1) * m];
            let cmax = (s + 1) * m;
            let (head, tail) = w.states.split_at_mut((j + 1) * n);
            let z = &head[j * n..];
            for st in 0..4 {
                if st == 0 {
                    w.node.copy_from_slice(z);
                } else {
                    for i in 0..n {
                        w.node[i] = z[i] + nodes[st] * dt * w.k[st - 1][i];
                    }
                }
                self.model.check_state(&w.node)?;
                self.model.field(&w.node, u, &mut w.k[st])?;
                if with_sens {
                    self.model.jacobians(&w.node, u, &mut w.a[st], &mut w.b[st])?;
                }
            }
            let next = &mut tail[..n];
            for i in 0..n {
                next[i] = z[i] + dt / 6.0 * (w.k[0][i] + 2.0 * w.k[1][i] + 2.0 * w.k[2][i] + w.k[3][i]);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    stage: s,
                    detail: format!(
                        "non-finite state at integration point {} (input {:?}, previous state {:?})",
                        j + 1,
                        u,
                        z
                    ),
                });
            }
            if !with_sens {
                continue;
            }
            let (sh, st_) = w.sens.split_at_mut((j + 1) * n * nu);
            let sj = &sh[j * n * nu..];
            for stg in 0..4 {
                // node sensitivity: S + c·dt·dk_{stg−1}
                if stg == 0 {
                    w.snode.copy_from_slice(sj);
                } else {
                    let prev = &w.dk[stg - 1];
                    for i in 0..n {
                        for c in 0..cmax {
                            w.snode[i * nu + c] = sj[i * nu + c] + nodes[stg] * dt * prev[i * nu + c];
                        }
                    }
                }
                let a = &w.a[stg];
                let b = &w.b[stg];
                let dk = &mut w.dk[stg];
                for i in 0..n {
                    for c in 0..cmax {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += a[i * n + l] * w.snode[l * nu + c];
                        }
                        dk[i * nu + c] = acc;
                    }
                    for l in 0..m {
                        dk[i * nu + s * m + l] += b[i * m + l];
                    }
                }
            }
            let snext = &mut st_[..n * nu];
            for i in 0..n {
                for c in 0..cmax {
                    let idx = i * nu + c;
                    snext[idx] = sj[idx]
                        + dt / 6.0 * (w.dk[0][idx] + 2.0 * w.dk[1][idx] + 2.0 * w.dk[2][idx] + w.dk[3][idx]);
                }
            }
        }
        Ok(())
    }

    fn error_at(&self, w: &Work, j: usize, out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            out[i] = w.states[j * n + i] - self.z_des[i];
        }
    }

    /// Objective without penalties.
    fn cost(&self, x: &[f64], w: &mut Work) -> f64 {
        let mut e = std::mem::take(&mut w.e);
        let mut cost = 0.0;
        for k in 0..self.stages {
            self.error_at(w, k * self.sub, &mut e);
            cost += self.h * (linalg::quad_form(self.q, &e) + linalg::quad_form(self.r, &x[k * self.m..(k + 1) * self.m]));
        }
        self.error_at(w, self.points(), &mut e);
        cost += linalg::quad_form(self.p, &e);
        w.e = e;
        cost
    }

    /// Constraint values `g ≤ 0` of the hard set, terminal last when hard.
    fn hard_values(&self, x: &[f64], w: &mut Work) -> Vec<f64> {
        let n = self.n;
        let mut g: Vec<f64> = self
            .hard
            .iter()
            .map(|en| -en.c.margin(&w.states[en.point * n..(en.point + 1) * n]))
            .collect();
        if self.terminal_hard {
            let mut e = std::mem::take(&mut w.e);
            self.error_at(w, self.points(), &mut e);
            g.push(linalg::quad_form(self.p, &e) - self.eps_omega);
            w.e = e;
        }
        g.extend(x.chunks(self.m).map(|u| self.input_value(u)));
        g
    }

    /// `(‖u‖² − ū²) / (2ū)`, nonpositive inside the input ball with unit
    /// slope at its boundary.
    fn input_value(&self, u: &[f64]) -> f64 {
        (u.iter().map(|v| v * v).sum::<f64>() - self.u_bar * self.u_bar) / (2.0 * self.u_bar)
    }

    fn al_count(&self) -> usize {
        self.hard.len() + usize::from(self.terminal_hard) + self.stages
    }

    fn evaluate(
        &self,
        x: &[f64],
        lam: &[f64],
        rho: f64,
        w: &mut Work,
        grad: Option<&mut [f64]>,
    ) -> Result<Eval> {
        let want = grad.is_some();
        self.rollout(x, w, want)?;
        let (n, m, nu, pts) = (self.n, self.m, self.nu(), self.points());
        let mut e = std::mem::take(&mut w.e);
        let mut egrad = std::mem::take(&mut w.egrad);
        let mut cgrad = std::mem::take(&mut w.cgrad);
        if want {
            w.cot.fill(0.0);
        }
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }

        let mut cost = 0.0;
        for k in 0..self.stages {
            let j = k * self.sub;
            self.error_at(w, j, &mut e);
            let u = &x[k * m..(k + 1) * m];
            cost += self.h * (linalg::quad_form(self.q, &e) + linalg::quad_form(self.r, u));
            if let Some(g) = grad.as_deref_mut() {
                linalg::quad_form_grad(self.q, &e, &mut egrad);
                for i in 0..n {
                    w.cot[j * n + i] += self.h * egrad[i];
                }
                let mut ug = vec![0.0; m];
                linalg::quad_form_grad(self.r, u, &mut ug);
                for l in 0..m {
                    g[k * m + l] += self.h * ug[l];
                }
            }
        }
        self.error_at(w, pts, &mut e);
        let v_end = linalg::quad_form(self.p, &e);
        cost += v_end;
        if want {
            linalg::quad_form_grad(self.p, &e, &mut egrad);
            for i in 0..n {
                w.cot[pts * n + i] += egrad[i];
            }
        }
        let os = self.objective_scale;
        let mut merit = os * cost;
        if os != 1.0 {
            if let Some(g) = grad.as_deref_mut() {
                g.iter_mut().for_each(|v| *v *= os);
            }
            if want {
                w.cot.iter_mut().for_each(|v| *v *= os);
            }
        }

        for (idx, en) in self.hard.iter().enumerate() {
            let z = &w.states[en.point * n..(en.point + 1) * n];
            let margin = if want {
                en.c.margin_and_gradient(z, &mut cgrad)
            } else {
                en.c.margin(z)
            };
            let t = lam[idx] - rho * margin;
            if t > 0.0 {
                merit += (t * t - lam[idx] * lam[idx]) / (2.0 * rho);
                if want {
                    for i in 0..n {
                        w.cot[en.point * n + i] -= t * cgrad[i];
                    }
                }
            } else {
                merit -= lam[idx] * lam[idx] / (2.0 * rho);
            }
        }
        for en in &self.soft {
            let z = &w.states[en.point * n..(en.point + 1) * n];
            let margin = if want {
                en.c.margin_and_gradient(z, &mut cgrad)
            } else {
                en.c.margin(z)
            };
            if margin < 0.0 {
                merit += 0.5 * self.tail_weight * margin * margin;
                if want {
                    for i in 0..n {
                        w.cot[en.point * n + i] += self.tail_weight * margin * cgrad[i];
                    }
                }
            }
        }
        let g_term = v_end - self.eps_omega;
        let term_coef = if self.terminal_hard {
            let l = lam[self.hard.len()];
            let t = l + rho * g_term;
            if t > 0.0 {
                merit += (t * t - l * l) / (2.0 * rho);
                t
            } else {
                merit -= l * l / (2.0 * rho);
                0.0
            }
        } else if g_term > 0.0 {
            merit += 0.5 * os * self.terminal_weight * g_term * g_term;
            os * self.terminal_weight * g_term
        } else {
            0.0
        };
        let base = self.hard.len() + usize::from(self.terminal_hard);
        for k in 0..self.stages {
            let u = &x[k * m..(k + 1) * m];
            let l = lam[base + k];
            let t = l + rho * self.input_value(u);
            if t > 0.0 {
                merit += (t * t - l * l) / (2.0 * rho);
                if let Some(g) = grad.as_deref_mut() {
                    for (gi, ui) in g[k * m..(k + 1) * m].iter_mut().zip(u) {
                        *gi += t * ui / self.u_bar;
                    }
                }
            } else {
                merit -= l * l / (2.0 * rho);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            if term_coef != 0.0 {
                linalg::quad_form_grad(self.p, &e, &mut egrad);
                for i in 0..n {
                    w.cot[pts * n + i] += term_coef * egrad[i];
                }
            }
            for j in 1..=pts {
                let s = (j - 1) / self.sub;
                let cmax = (s + 1) * m;
                let sj = &w.sens[j * n * nu..(j + 1) * n * nu];
                for i in 0..n {
                    let ci = w.cot[j * n + i];
                    if ci == 0.0 {
                        continue;
                    }
                    for c in 0..cmax {
                        g[c] += ci * sj[i * nu + c];
                    }
                }
            }
        }
        w.e = e;
        w.egrad = egrad;
        w.cgrad = cgrad;
        if !merit.is_finite() {
            return Err(Error::Divergence {
                stage: self.stages,
                detail: format!("non-finite merit {merit} (cost {cost})"),
            });
        }
        Ok(Eval { merit })
    }

}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

struct InnerOutcome {
    iterations: usize,
    converged: bool,
    /// The line search found no decrease; the iterate is stationary to
    /// working precision.
    stalled: bool,
    merit: f64,
    grad_norm: f64,
}

/// Evaluates a trial point; model-domain errors count as rejection.
fn trial(
    prob: &Problem,
    xt: &[f64],
    lam: &[f64],
    rho: f64,
    w: &mut Work,
    gt: &mut [f64],
) -> Result<Option<Eval>> {
    match prob.evaluate(xt, lam, rho, w, Some(gt)) {
        Ok(ev) => Ok(Some(ev)),
        Err(e) if is_domain_error(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

/// BFGS with Armijo backtracking on the augmented Lagrangian. `hinv` carries
/// the inverse-Hessian estimate across outer iterations.
#[allow(clippy::too_many_arguments)]
fn minimize(
    prob: &Problem,
    x: &mut [f64],
    lam: &[f64],
    rho: f64,
    tol: f64,
    max_iter: usize,
    hinv: &mut Option<DMatrix<f64>>,
    w: &mut Work,
) -> Result<InnerOutcome> {
    let nu = prob.nu();
    let mut g = vec![0.0; nu];
    let mut f = prob.evaluate(x, lam, rho, w, Some(&mut g))?.merit;
    let mut gt = vec![0.0; nu];
    let mut xt = vec![0.0; nu];
    let mut d = vec![0.0; nu];

    for it in 0..max_iter {
        let gn = inf_norm(&g);
        if gn <= tol {
            return Ok(InnerOutcome {
                iterations: it,
                converged: true,
                stalled: false,
                merit: f,
                grad_norm: gn,
            });
        }
        let h = hinv.get_or_insert_with(|| DMatrix::identity(nu, nu) / gn.max(1.0));
        let mut gd = 0.0;
        for i in 0..nu {
            d[i] = -(0..nu).map(|j| h[(i, j)] * g[j]).sum::<f64>();
            gd += g[i] * d[i];
        }
        if !(gd < 0.0) {
            *h = DMatrix::identity(nu, nu) / gn.max(1.0);
            for i in 0..nu {
                d[i] = -h[(i, i)] * g[i];
            }
            gd = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        }
        let mut accepted = None;
        for attempt in 0..2 {
            let mut alpha = 1.0;
            for _ in 0..30 {
                for i in 0..nu {
                    xt[i] = x[i] + alpha * d[i];
                }
                if let Some(ev) = trial(prob, &xt, lam, rho, w, &mut gt)? {
                    if ev.merit <= f + 1e-4 * alpha * gd {
                        accepted = Some(ev.merit);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() || attempt == 1 {
                break;
            }
            // the quasi-Newton model is stale: restart from scaled steepest descent
            let h = hinv.insert(DMatrix::identity(nu, nu) / gn.max(1.0));
            for i in 0..nu {
                d[i] = -h[(i, i)] * g[i];
            }
            gd = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        }
        let Some(ft) = accepted else {
            return Ok(InnerOutcome {
                iterations: it,
                converged: false,
                stalled: true,
                merit: f,
                grad_norm: gn,
            });
        };

        let s: Vec<f64> = (0..nu).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..nu).map(|i| gt[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * linalg::norm(&s) * yy.sqrt() {
            let sv = nalgebra::DVector::from_column_slice(&s);
            let yv = nalgebra::DVector::from_column_slice(&y);
            let h = hinv.as_mut().expect("initialized above");
            if it == 0 {
                *h = DMatrix::identity(nu, nu) * (sy / yy);
            }
            let rho_b = 1.0 / sy;
            let hy = &*h * &yv;
            let yhy = yv.dot(&hy);
            // H⁺ = H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            *h -= (&hy * sv.transpose() + &sv * hy.transpose()) * rho_b;
            *h += (&sv * sv.transpose()) * (rho_b * rho_b * yhy + rho_b);
        }
        x.copy_from_slice(&xt);
        g.copy_from_slice(&gt);
        f = ft;
    }
    let gn = inf_norm(&g);
    Ok(InnerOutcome {
        iterations: max_iter,
        converged: gn <= tol,
        stalled: false,
        merit: f,
        grad_norm: gn,
    })
}

struct RunOutcome {
    x: Vec<f64>,
    status: SolveStatus,
    residual: f64,
    outer: usize,
    inner: usize,
    diagnostics: Vec<DiagnosticRow>,
}

fn run(prob: &Problem, x0: &[f64], config: &OcpConfig, w: &mut Work) -> Result<RunOutcome> {
    let s = &config.solver;
    let mut x = x0.to_vec();
    prob.project(&mut x);
    let mut lam = vec![0.0; prob.al_count()];
    let mut rho = s.initial_penalty;
    let mut prev_viol = f64::INFINITY;
    let mut total_inner = 0;
    let mut diagnostics = Vec::new();
    let mut status = None;
    let mut outer_done = 0;
    let mut hinv = None;
    // stationarity is measured relative to the initial gradient
    let mut g0 = vec![0.0; prob.nu()];
    prob.evaluate(&x, &lam, rho, w, Some(&mut g0))?;
    let scale = inf_norm(&g0).max(1.0);

    for outer in 0..s.max_outer {
        outer_done = outer + 1;
        let rel = (1e-2 * 0.1f64.powi(outer as i32)).max(s.stationarity_tol);
        let final_tol = rel <= s.stationarity_tol * (1.0 + 1e-9);
        let budget = s.max_inner.saturating_sub(total_inner);
        if budget == 0 {
            break;
        }
        let inner = minimize(prob, &mut x, &lam, rho, rel * scale, budget, &mut hinv, w)?;
        total_inner += inner.iterations;
        prob.rollout(&x, w, false)?;
        let g = prob.hard_values(&x, w);
        let viol = g.iter().copied().fold(0.0, f64::max);
        if s.diagnostics {
            let cost = prob.cost(&x, w);
            diagnostics.push(DiagnosticRow {
                outer,
                inner: inner.iterations,
                merit: inner.merit,
                cost,
                residual: viol,
                penalty: rho,
            });
        }
        if viol <= s.constraint_tol {
            // stationary to working precision once the gradient is at the
            // rounding level of the merit
            let precise = inner.converged
                || (inner.stalled && inner.grad_norm <= 1e-6 * (1.0 + inner.merit.abs()));
            if final_tol && inner.converged {
                status = Some(SolveStatus::Optimal);
                break;
            }
            if inner.stalled && (final_tol || inner.iterations == 0) {
                status = Some(if precise {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::FeasibleSuboptimal
                });
                break;
            }
        } else if rho >= s.max_penalty && viol > 0.9 * prev_viol {
            status = Some(SolveStatus::Infeasible);
            break;
        }
        for (l, gi) in lam.iter_mut().zip(&g) {
            *l = (*l + rho * gi).max(0.0);
        }
        if viol > s.constraint_tol && viol > 0.25 * prev_viol {
            rho = (rho * 10.0).min(s.max_penalty);
        }
        prev_viol = viol;
    }

    // inputs land exactly in their balls; the residual is re-evaluated there
    prob.project(&mut x);
    prob.rollout(&x, w, false)?;
    let residual = prob.hard_values(&x, w).into_iter().fold(0.0, f64::max);
    let status = match status {
        Some(SolveStatus::Infeasible) => SolveStatus::Infeasible,
        _ if residual > s.constraint_tol => SolveStatus::Infeasible,
        Some(st) => st,
        None => SolveStatus::FeasibleSuboptimal,
    };
    Ok(RunOutcome {
        x,
        status,
        residual,
        outer: outer_done,
        inner: total_inner,
        diagnostics,
    })
}

/// Feasibility restoration for the relaxed problem: a nearly pure
/// feasibility solve from the failed iterate and from zero input, each
/// followed by a full solve started there. Falls back to the first feasible
/// restoration point.
fn restore(prob: &mut Problem, x0: &[f64], failed: RunOutcome, config: &OcpConfig, w: &mut Work) -> Result<RunOutcome> {
    let starts = [failed.x.clone(), x0.to_vec(), vec![0.0; x0.len()]];
    let mut fallback = None;
    for start in &starts {
        prob.objective_scale = 1e-4;
        let feas = run(prob, start, config, w)?;
        prob.objective_scale = 1.0;
        if feas.status == SolveStatus::Infeasible {
            continue;
        }
        let full = run(prob, &feas.x, config, w)?;
        if full.status != SolveStatus::Infeasible {
            return Ok(full);
        }
        if fallback.is_none() {
            fallback = Some(RunOutcome {
                status: SolveStatus::FeasibleSuboptimal,
                ..feas
            });
        }
    }
    Ok(fallback.unwrap_or(failed))
}

/// Solves the finite-horizon problem from `e0` over the constraint grid.
///
/// The strictly tightened problem is attempted first unless its sets are
/// empty for every state at some point of the horizon. If it fails and
/// relaxation is enabled, the relaxed problem described on
/// [`super::RelaxationSettings`] is solved instead and the result carries a
/// [`Relaxation`] record.
pub fn solve_fhocp(
    model: &ErrorDynamics,
    e0: &[f64],
    grid: &ConstraintGrid,
    config: &OcpConfig,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<HorizonSolution> {
    solve_fhocp_with_guesses(model, e0, grid, config, warm_start, &[])
}

/// [`solve_fhocp`] with alternative initial guesses, tried in order when the
/// relaxed problem with a hard terminal constraint fails from the warm start.
pub fn solve_fhocp_with_guesses(
    model: &ErrorDynamics,
    e0: &[f64],
    grid: &ConstraintGrid,
    config: &OcpConfig,
    warm_start: Option<&[Vec<f64>]>,
    alternatives: &[Vec<Vec<f64>>],
) -> Result<HorizonSolution> {
    let started = Instant::now();
    let base = model.model().as_ref();
    let (n, m) = (base.state_dim(), base.input_dim());
    check_dim(n, e0.len())?;
    check_dim(config.q.nrows(), n)?;
    check_dim(config.r.nrows(), m)?;
    check_dim(config.points(), grid.points.len())?;
    if e0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("initial error must be finite".into()));
    }
    let stages = config.stages();
    let nu = stages * m;
    let flatten = |seq: &[Vec<f64>]| -> Result<Vec<f64>> {
        check_dim(stages, seq.len())?;
        let mut x = Vec::with_capacity(nu);
        for u in seq {
            check_dim(m, u.len())?;
            x.extend_from_slice(u);
        }
        Ok(x)
    };
    let x0 = match warm_start {
        Some(ws) => flatten(ws)?,
        None => vec![0.0; nu],
    };
    let others = alternatives.iter().map(|g| flatten(g)).collect::<Result<Vec<_>>>()?;
    // hard constraints are backed off by the feasibility tolerance so that
    // accepted solutions satisfy the unshifted ones
    let backoff = config.solver.constraint_tol.min(0.5 * config.terminal.eps_omega);
    let mut z0 = vec![0.0; n];
    model.state_of(e0, &mut z0);
    base.check_state(&z0)?;

    let mut prob = Problem {
        model: base,
        z_des: model.reference(),
        z0,
        n,
        m,
        stages,
        sub: config.substeps,
        dt: config.dt(),
        h: config.h,
        q: &config.q,
        r: &config.r,
        p: &config.terminal.p,
        eps_omega: config.terminal.eps_omega - backoff,
        u_bar: config.input_bound,
        hard: Vec::new(),
        soft: Vec::new(),
        terminal_hard: true,
        tail_weight: config.solver.relaxation.tail_weight,
        terminal_weight: config.solver.relaxation.terminal_weight,
        objective_scale: 1.0,
    };
    let mut w = Work::new(n, m, config.points(), nu);
    let hard_entry = |point: usize, mut c: ScalarConstraint| {
        c.offset += backoff;
        Entry { point, c }
    };

    let empty_from = grid.first_empty_point()?;
    let relax = &config.solver.relaxation;
    let mut strict_attempted = false;
    let mut outcome = None;
    if empty_from.is_none() || !relax.enabled {
        strict_attempted = true;
        for j in 0..grid.points.len() {
            for c in grid.tightened(j, GridMode::Strict)? {
                prob.hard.push(hard_entry(j + 1, c));
            }
        }
        let out = run(&prob, &x0, config, &mut w)?;
        if out.status != SolveStatus::Infeasible || !relax.enabled {
            outcome = Some((out, None));
        }
    }
    let (out, relaxation) = match outcome {
        Some(o) => o,
        None => {
            prob.hard.clear();
            prob.soft.clear();
            for j in 0..grid.points.len() {
                let cons = grid.tightened(j, GridMode::Relaxed)?;
                for c in cons {
                    if grid.in_executed_segment(j) {
                        prob.hard.push(hard_entry(j + 1, c));
                    } else {
                        prob.soft.push(Entry { point: j + 1, c });
                    }
                }
            }
            // the terminal constraint stays hard when that is feasible
            prob.terminal_hard = true;
            let mut out = run(&prob, &x0, config, &mut w)?;
            for guess in &others {
                if out.status != SolveStatus::Infeasible {
                    break;
                }
                out = run(&prob, guess, config, &mut w)?;
            }
            if out.status == SolveStatus::Infeasible {
                prob.terminal_hard = false;
                out = run(&prob, &x0, config, &mut w)?;
            }
            if out.status == SolveStatus::Infeasible {
                out = restore(&mut prob, &x0, out, config, &mut w)?;
            }
            if out.status == SolveStatus::Optimal {
                out.status = SolveStatus::FeasibleSuboptimal;
            }
            prob.rollout(&out.x, &mut w, false)?;
            let tail_violation = prob
                .soft
                .iter()
                .map(|en| -en.c.margin(&w.states[en.point * n..(en.point + 1) * n]))
                .fold(0.0, f64::max);
            let mut e = vec![0.0; n];
            prob.error_at(&w, prob.points(), &mut e);
            let terminal_excess = (linalg::quad_form(prob.p, &e) - config.terminal.eps_omega).max(0.0);
            let rel = Relaxation {
                empty_from: empty_from.map(|j| grid.tau(j)),
                tail_violation,
                terminal_excess,
            };
            (out, Some(rel))
        }
    };

    prob.rollout(&out.x, &mut w, false)?;
    let cost = prob.cost(&out.x, &mut w);
    let worst_margin = prob
        .hard
        .iter()
        .map(|en| (en.c.kind, en.c.margin(&w.states[en.point * n..(en.point + 1) * n]) + backoff))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let worst_margin: Option<(ConstraintKind, f64)> = worst_margin;
    let dense: Vec<Vec<f64>> = (0..=prob.points())
        .map(|j| {
            let mut e = vec![0.0; n];
            prob.error_at(&w, j, &mut e);
            e
        })
        .collect();
    let predicted: Vec<Vec<f64>> = (0..=stages).map(|k| dense[k * config.substeps].clone()).collect();
    let inputs: Vec<Vec<f64>> = out.x.chunks(m).map(<[f64]>::to_vec).collect();

    Ok(HorizonSolution {
        inputs,
        predicted_errors: predicted,
        dense_errors: dense,
        dense_step: config.dt(),
        cost,
        status: out.status,
        relaxation,
        worst_margin,
        stats: SolveStats {
            outer_iterations: out.outer,
            inner_iterations: out.inner,
            wall_time: started.elapsed().as_secs_f64(),
            constraint_residual: out.residual,
            strict_attempted,
        },
        diagnostics: out.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::constraints::{ConstraintForm, TerminalSet};
    use crate::dynamics::{LinearModel, Unicycle};

    fn unicycle_config(eps_omega: f64) -> OcpConfig {
        OcpConfig::new(
            0.1,
            0.6,
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2) * 0.01,
            TerminalSet::new(DMatrix::identity(3, 3), eps_omega, eps_omega * 10.0).unwrap(),
            8.0 * 2f64.sqrt(),
        )
        .unwrap()
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let err = ErrorDynamics::new(Arc::new(Unicycle), vec![1.0, 2.0, 0.3]).unwrap();
        let cfg = unicycle_config(0.01);
        let prob = Problem {
            model: err.model().as_ref(),
            z_des: err.reference(),
            z0: vec![0.0, 2.5, 0.5],
            n: 3,
            m: 2,
            stages: 6,
            sub: 10,
            dt: cfg.dt(),
            h: cfg.h,
            q: &cfg.q,
            r: &cfg.r,
            p: &cfg.terminal.p,
            eps_omega: cfg.terminal.eps_omega,
            u_bar: cfg.input_bound,
            hard: vec![Entry {
                point: 25,
                c: ScalarConstraint {
                    kind: ConstraintKind::Obstacle,
                    form: ConstraintForm::MinDistance {
                        point: vec![0.5, 2.0],
                        threshold: 5.0,
                    },
                    lipschitz: 1.0,
                    offset: 0.0,
                    target: None,
                },
            }],
            soft: Vec::new(),
            terminal_hard: true,
            tail_weight: 0.0,
            terminal_weight: 0.0,
            objective_scale: 0.7,
        };
        let x: Vec<f64> = (0..12).map(|i| 0.3 * (i as f64 * 0.7).sin() + 0.2).collect();
        let mut lam = vec![0.0; prob.al_count()];
        lam[0] = 0.5;
        lam[1] = 0.1;
        lam[4] = 2.0;
        let mut w = Work::new(3, 2, 60, 12);
        let mut g = vec![0.0; 12];
        prob.evaluate(&x, &lam, 10.0, &mut w, Some(&mut g)).unwrap();
        for c in 0..12 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += 1e-6;
            xm[c] -= 1e-6;
            let fp = prob.evaluate(&xp, &lam, 10.0, &mut w, None).unwrap().merit;
            let fm = prob.evaluate(&xm, &lam, 10.0, &mut w, None).unwrap().merit;
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[c]).abs() < 1e-5 * (1.0 + fd.abs()), "component {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn origin_is_unconstrained_minimizer() {
        let err = ErrorDynamics::new(Arc::new(Unicycle), vec![1.0, 1.0, 0.0]).unwrap();
        let cfg = unicycle_config(0.01);
        let grid = ConstraintGrid::unconstrained(&cfg);
        let sol = solve_fhocp(&err, &[0.0; 3], &grid, &cfg, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.cost <= 1e-8);
        assert!(sol.inputs.iter().all(|u| linalg::norm(u) < 1e-6));
    }

    #[test]
    fn input_bound_is_respected() {
        let err = ErrorDynamics::new(Arc::new(LinearModel::double_integrator(1)), vec![0.0, 0.0]).unwrap();
        let cfg = OcpConfig::new(
            0.1,
            0.6,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1) * 1e-3,
            TerminalSet::new(DMatrix::identity(2, 2) * 10.0, 1e3, 2e3).unwrap(),
            0.5,
        )
        .unwrap();
        let grid = ConstraintGrid::unconstrained(&cfg);
        let sol = solve_fhocp(&err, &[5.0, 0.0], &grid, &cfg, None).unwrap();
        assert!(sol.is_feasible());
        assert!(sol.inputs.iter().all(|u| linalg::norm(u) <= 0.5 + 1e-12));
        assert!((sol.inputs[0][0] + 0.5).abs() < 1e-9);
    }
}
