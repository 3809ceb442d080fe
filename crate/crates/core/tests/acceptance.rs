//! Acceptance suite for the three-unicycle reference scenario and the
//! numerical building blocks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdmpc::certify::{disturbance_bound, ultimate_bound, verify, Certificate, VerificationReport};
use rdmpc::constraints::{tighten, ConstraintForm, ConstraintKind, ScalarConstraint, TerminalSet};
use rdmpc::coordination::RunOutcome;
use rdmpc::dynamics::{
    estimate_lipschitz, integrate, DEFAULT_LIPSCHITZ_SAFETY, sample_ball, DisturbanceSignal, ErrorDynamics, LinearModel, LipschitzRegion,
    Unicycle, ZohInput,
};
use rdmpc::linalg;
use rdmpc::ocp::{solve_fhocp, ConstraintGrid, OcpConfig};
use rdmpc::scenario::Scenario;
use rdmpc::setalg::{minkowski_add, minkowski_add_sets, pontryagin_diff, pontryagin_diff_sets, Ball, BallSet, TubeProfile};

/// Admissible disturbance bound of the reference constants, computed
/// independently in closed form.
const ORACLE_W_MAX: f64 = 0.10006499522412013;
/// `sqrt(0.0035 / 0.4710)`, computed independently.
const ORACLE_ULTIMATE: f64 = 0.08620323588391418;
/// Finite-horizon LQR inputs of the discretized double integrator from
/// `x0 = (1, 0)`, stages 0, 1, 10 and 19, from a separate backward
/// recursion in double precision.
const ORACLE_DP_INPUTS: [(usize, f64); 4] = [
    (0, -0.9321234896029913),
    (1, -0.7742546644782775),
    (10, 0.02189826891257341),
    (19, 0.23408720022628263),
];
/// Optimal cost `x0ᵀ P_0 x0` from the same recursion.
const ORACLE_DP_COST: f64 = 1.8216675693350384;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn load(name: &str, total_time: Option<f64>) -> Scenario {
    let sc = Scenario::load(&scenario_path(name)).expect("bundled scenario loads");
    match total_time {
        Some(t) => {
            let mut file = sc.file.clone();
            file.total_time = t;
            Scenario::from_file(file).expect("modified scenario validates")
        }
        None => sc,
    }
}

struct ClosedLoop {
    outcome: RunOutcome,
    report: VerificationReport,
    seconds: f64,
}

fn closed_loop(sc: &Scenario) -> ClosedLoop {
    let mut sim = sc.simulation().expect("simulation builds");
    sim.annotate("duration", sc.file.total_time);
    let started = Instant::now();
    let outcome = sim.run(sc.file.total_time, |_| Ok(()));
    let seconds = started.elapsed().as_secs_f64();
    let report = verify(&outcome.log, sc).expect("log verifies");
    ClosedLoop {
        outcome,
        report,
        seconds,
    }
}

fn check_line(report: &VerificationReport, name: &str) -> (bool, String) {
    let c = report.check(name).expect("check exists");
    (c.passed, format!("{name} worst {:.4e} at t={:.2}", c.worst, c.time))
}

fn run_error(run: &ClosedLoop) -> Option<String> {
    run.outcome.error.as_ref().map(|e| e.to_string())
}

fn reference_replay(run: &ClosedLoop) -> Verdict {
    let r = &run.report;
    let mut pass = run.outcome.error.is_none() && run.seconds <= 600.0;
    let mut parts = Vec::new();
    for (name, offset, sign) in [
        ("inter_agent", 1.01, 1.0),
        ("neighbor", 1.99, -1.0),
        ("obstacle", 1.51, 1.0),
    ] {
        let c = r.check(name).expect("check exists");
        pass &= c.passed;
        parts.push(format!("{name} distance {:.4}", offset + sign * c.worst));
    }
    for name in ["workspace", "input_bound"] {
        let (ok, line) = check_line(r, name);
        pass &= ok;
        parts.push(line);
    }
    if let Some(e) = run_error(run) {
        parts.push(format!("run stopped: {e}"));
    }
    parts.push(format!("runtime {:.1} s", run.seconds));
    Verdict {
        id: 1,
        name: "reference replay, 10 s",
        pass,
        detail: parts.join(", "),
    }
}

fn trapping(run: &ClosedLoop) -> Verdict {
    let (ok, line) = check_line(&run.report, "v_trapping");
    let err = run_error(run);
    Verdict {
        id: 2,
        name: "terminal trapping, 100 s",
        pass: ok && err.is_none(),
        detail: match err {
            Some(e) => format!("{line}, run stopped: {e}"),
            None => format!("{line}, runtime {:.1} s", run.seconds),
        },
    }
}

fn certificate_arithmetic() -> Verdict {
    let w = disturbance_bound(0.0582, 0.0035, 0.0471, 8.5883, 0.1, 0.6).expect("valid constants");
    let u = ultimate_bound(0.0035, 0.4710).expect("valid constants");
    let cert = Certificate::from_scenario(&load("three_unicycles.toml", None)).expect("certificate");
    let pass = (w - ORACLE_W_MAX).abs() < 1e-12
        && (u - ORACLE_ULTIMATE).abs() < 1e-12
        && (w - 0.100).abs() <= 0.001
        && (u - 0.0862).abs() <= 0.0005
        && cert.consistent();
    Verdict {
        id: 3,
        name: "certificate arithmetic",
        pass,
        detail: format!("w_max {w:.6}, ultimate bound {u:.6}, scenario admissible {}", cert.consistent()),
    }
}

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.random_range(-6.0..=6.0),
        rng.random_range(-6.0..=6.0),
        rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI),
    ]
}

struct Rollout {
    times: Vec<f64>,
    nominal: Vec<Vec<f64>>,
    disturbed: Vec<Vec<f64>>,
}

fn random_rollout(rng: &mut ChaCha8Rng, u_bar: f64, w_bar: f64) -> Rollout {
    let z0 = random_state(rng);
    let input = ZohInput {
        period: 0.1,
        values: (0..6).map(|_| sample_ball(rng, 2, u_bar)).collect(),
    };
    let period = [0.01, 0.05, 0.1][rng.random_range(0..3)];
    let w = DisturbanceSignal::piecewise_random(3, w_bar, period, 0.6, rng.random()).expect("signal");
    let nominal = integrate(&Unicycle, &z0, &input, None, 0.0, 0.6, 0.01).expect("nominal rollout");
    let disturbed = integrate(&Unicycle, &z0, &input, Some(&w), 0.0, 0.6, 0.01).expect("disturbed rollout");
    Rollout {
        times: nominal.times,
        nominal: nominal.states,
        disturbed: disturbed.states,
    }
}

fn tube_validity(sc: &Scenario) -> Verdict {
    let u_bar = sc.file.input_bound;
    let w_bar = sc.w_bar();
    let region = LipschitzRegion {
        state_lo: vec![-10.0, -10.0, -std::f64::consts::PI],
        state_hi: vec![10.0, 10.0, std::f64::consts::PI],
        input_bound: u_bar,
    };
    let estimated = estimate_lipschitz(&Unicycle, &region, 20_000, 11, DEFAULT_LIPSCHITZ_SAFETY).expect("estimate");
    let tubes = [
        TubeProfile::new(w_bar, sc.lipschitz[0]).expect("tube"),
        TubeProfile::new(w_bar, estimated).expect("tube"),
    ];
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = [0usize; 2];
    let mut tightest = [f64::INFINITY; 2];
    for _ in 0..100 {
        let ro = random_rollout(&mut rng, u_bar, w_bar);
        for (k, t) in ro.times.iter().enumerate().skip(1) {
            let gap = linalg::distance(&ro.nominal[k], &ro.disturbed[k]);
            for (i, tube) in tubes.iter().enumerate() {
                let slack = tube.radius(*t).expect("radius") - gap;
                tightest[i] = tightest[i].min(slack);
                if slack < 0.0 {
                    violations[i] += 1;
                }
            }
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    Verdict {
        id: 4,
        name: "tube validity",
        pass: violations == [0, 0] && seconds <= 60.0,
        detail: format!(
            "violations {} with L = {} (min slack {:.3e}), {} with estimated L = {:.4} (min slack {:.3e}), {:.2} s",
            violations[0], tubes[0].lipschitz, tightest[0], violations[1], estimated, tightest[1], seconds
        ),
    }
}

fn distance_constraint(kind: ConstraintKind, point: Vec<f64>, threshold: f64, keep_out: bool) -> ScalarConstraint {
    ScalarConstraint {
        kind,
        form: if keep_out {
            ConstraintForm::MinDistance { point, threshold }
        } else {
            ConstraintForm::MaxDistance { point, threshold }
        },
        lipschitz: 1.0,
        offset: 0.0,
        target: None,
    }
}

fn tightening_soundness(sc: &Scenario) -> Verdict {
    let u_bar = sc.file.input_bound;
    let tube = TubeProfile::new(sc.w_bar(), sc.lipschitz[0]).expect("tube");
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut violations, mut unsatisfied) = (0usize, 0usize);
    let mut checked = 0usize;
    for _ in 0..100 {
        let ro = random_rollout(&mut rng, u_bar, sc.w_bar());
        let n = ro.times.len();
        let rho: Vec<f64> = ro.times.iter().map(|t| tube.radius(*t).expect("radius")).collect();
        let pos = |k: usize| ro.nominal[k][..2].to_vec();
        // a static obstacle plus a moving agent to stay near and apart from,
        // each sized so that the nominal path touches its tightened boundary
        let obstacle = {
            let c: Vec<f64> = pos(0).iter().map(|p| p + rng.random_range(-4.0..=4.0)).collect();
            let th = (1..n)
                .map(|k| linalg::distance(&pos(k), &c) - rho[k])
                .fold(f64::INFINITY, f64::min);
            (th > 0.0).then(|| distance_constraint(ConstraintKind::Obstacle, c, th, true))
        };
        let offset: Vec<f64> = sample_ball(&mut rng, 2, 3.0);
        let drift: Vec<f64> = sample_ball(&mut rng, 2, 2.0);
        let other = |k: usize| -> Vec<f64> {
            let s = ro.times[k];
            (0..2).map(|d| pos(0)[d] + offset[d] + drift[d] * s).collect()
        };
        let th_near = (1..n)
            .map(|k| linalg::distance(&pos(k), &other(k)) + rho[k])
            .fold(0.0, f64::max);
        let th_far = (1..n)
            .map(|k| linalg::distance(&pos(k), &other(k)) - rho[k])
            .fold(f64::INFINITY, f64::min);
        for k in 1..n {
            // keep-out sets that the nominal path cannot clear are skipped
            let mut set = vec![distance_constraint(ConstraintKind::Neighbor, other(k), th_near, false)];
            set.extend(obstacle.clone());
            if th_far > 0.0 {
                set.push(distance_constraint(ConstraintKind::InterAgent, other(k), th_far, true));
            }
            let tightened = tighten(&set, ro.times[k], &tube).expect("tighten");
            if tightened.iter().any(|c| c.margin(&ro.nominal[k]) < -1e-12) {
                unsatisfied += 1;
                continue;
            }
            for c in &set {
                checked += 1;
                if c.margin(&ro.disturbed[k]) < 0.0 {
                    violations += 1;
                }
            }
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    Verdict {
        id: 5,
        name: "tightening soundness",
        pass: violations == 0 && unsatisfied == 0 && seconds <= 120.0,
        detail: format!(
            "{violations} violations over {checked} margins, {unsatisfied} nominal points outside the tightened sets, {seconds:.2} s"
        ),
    }
}

fn recursive_feasibility(run: &ClosedLoop) -> Verdict {
    let (ok_status, status) = check_line(&run.report, "solver_status");
    let (ok_mono, mono) = check_line(&run.report, "v_monotone");
    let err = run_error(run);
    Verdict {
        id: 6,
        name: "recursive feasibility without disturbance",
        pass: ok_status && ok_mono && err.is_none(),
        detail: match err {
            Some(e) => format!("{status}, {mono}, run stopped: {e}"),
            None => format!("{status}, {mono}"),
        },
    }
}

fn sample_in(rng: &mut ChaCha8Rng, b: &Ball, scale: f64) -> Vec<f64> {
    let d = sample_ball(rng, b.dim(), b.radius() * scale);
    b.center().iter().zip(d).map(|(c, x)| c + x).collect()
}

fn random_ball(rng: &mut ChaCha8Rng, dim: usize, r_max: f64) -> Ball {
    let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..=3.0)).collect();
    Ball::from_slice(&c, rng.random_range(0.0..=r_max)).expect("ball")
}

fn set_algebra() -> Verdict {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0usize;
    for k in 0..10_000 {
        let dim = 2 + k % 2;
        let a = random_ball(&mut rng, dim, 3.0);
        let b = random_ball(&mut rng, dim, 3.0);
        let sum = minkowski_add(&a, &b).expect("sum");
        // every a + b lies in the closed form
        let p: Vec<f64> = sample_in(&mut rng, &a, 1.0)
            .iter()
            .zip(sample_in(&mut rng, &b, 1.0))
            .map(|(x, y)| x + y)
            .collect();
        if !sum.contains(&p, TOL) {
            mismatches += 1;
        }
        // every point of the closed form splits into a + b
        let x = sample_in(&mut rng, &sum, 1.0);
        let share = if sum.radius() > 0.0 { a.radius() / sum.radius() } else { 0.0 };
        let pa: Vec<f64> = (0..dim)
            .map(|d| a.center()[d] + share * (x[d] - sum.center()[d]))
            .collect();
        let pb: Vec<f64> = x.iter().zip(&pa).map(|(x, y)| x - y).collect();
        if !a.contains(&pa, TOL) || !b.contains(&pb, TOL) {
            mismatches += 1;
        }

        let diff = pontryagin_diff(&a, &b).expect("difference");
        // a point is in A ⊖ B iff its translate of B stays in A; the farthest
        // translate is attained along the offset from A's center
        let probe = sample_in(&mut rng, &a, 1.2);
        let shifted: Vec<f64> = probe.iter().zip(b.center().iter()).map(|(x, c)| x + c).collect();
        let off: Vec<f64> = shifted.iter().zip(a.center().iter()).map(|(s, c)| s - c).collect();
        let nrm = linalg::norm(&off);
        let dir: Vec<f64> = if nrm > 0.0 {
            off.iter().map(|v| v / nrm).collect()
        } else {
            (0..dim).map(|d| if d == 0 { 1.0 } else { 0.0 }).collect()
        };
        let mut witnesses = vec![dir.clone()];
        for _ in 0..16 {
            let s = sample_ball(&mut rng, dim, 1.0);
            let n = linalg::norm(&s);
            if n > 0.0 {
                witnesses.push(s.iter().map(|v| v / n).collect());
            }
        }
        let mut inside = true;
        let mut worst: f64 = f64::NEG_INFINITY;
        for u in &witnesses {
            let q: Vec<f64> = shifted.iter().zip(u).map(|(s, u)| s + b.radius() * u).collect();
            let excess = linalg::distance(&q, a.center().as_slice()) - a.radius();
            worst = worst.max(excess);
            inside &= excess <= 0.0;
        }
        if worst.abs() < TOL {
            continue;
        }
        let closed = match &diff {
            BallSet::Ball(d) => d.contains(&probe, 0.0),
            BallSet::Empty => false,
        };
        if closed != inside {
            mismatches += 1;
        }
    }

    let mut identity_err: f64 = 0.0;
    for _ in 0..1000 {
        let mut r: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..=5.0)).collect();
        r.sort_by(|x, y| y.total_cmp(x));
        let s: Vec<Ball> = r.iter().map(|ri| Ball::origin(2, *ri).expect("ball")).collect();
        let left = minkowski_add_sets(
            &pontryagin_diff(&s[0], &s[1]).expect("diff"),
            &pontryagin_diff(&s[1], &s[2]).expect("diff"),
        )
        .expect("sum");
        let right = pontryagin_diff_sets(
            &BallSet::Ball(minkowski_add(&s[0], &s[1]).expect("sum")),
            &BallSet::Ball(minkowski_add(&s[1], &s[2]).expect("sum")),
        )
        .expect("diff");
        match (left.ball(), right.ball()) {
            (Some(l), Some(rb)) => {
                identity_err = identity_err
                    .max((l.radius() - rb.radius()).abs())
                    .max((l.center() - rb.center()).amax());
            }
            _ => identity_err = f64::INFINITY,
        }
    }
    Verdict {
        id: 7,
        name: "set algebra",
        pass: mismatches == 0 && identity_err <= 1e-12,
        detail: format!("{mismatches} oracle mismatches over 10^4 samples, identity error {identity_err:.1e}"),
    }
}

/// Backward Riccati recursion of the exactly discretized double integrator.
fn dp_inputs(h: f64, stages: usize, x0: [f64; 2]) -> (Vec<f64>, f64) {
    let a = [[1.0, h], [0.0, 1.0]];
    let b = [h * h / 2.0, h];
    let mut p = [[1.0, 0.0], [0.0, 1.0]];
    let mut gains = Vec::with_capacity(stages);
    for _ in 0..stages {
        let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
        let s = h + b[0] * pb[0] + b[1] * pb[1];
        // K = (R + BᵀPB)⁻¹ BᵀPA
        let bpa = [
            pb[0] * a[0][0] + pb[1] * a[1][0],
            pb[0] * a[0][1] + pb[1] * a[1][1],
        ];
        let k = [bpa[0] / s, bpa[1] / s];
        let acl = [
            [a[0][0] - b[0] * k[0], a[0][1] - b[0] * k[1]],
            [a[1][0] - b[1] * k[0], a[1][1] - b[1] * k[1]],
        ];
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut v = if i == j { h } else { 0.0 };
                for r in 0..2 {
                    for c in 0..2 {
                        v += a[r][i] * p[r][c] * acl[c][j];
                    }
                }
                next[i][j] = v;
            }
        }
        p = next;
        gains.push(k);
    }
    gains.reverse();
    let cost = x0[0] * (p[0][0] * x0[0] + p[0][1] * x0[1]) + x0[1] * (p[1][0] * x0[0] + p[1][1] * x0[1]);
    let mut x = x0;
    let mut us = Vec::with_capacity(stages);
    for k in &gains {
        let u = -(k[0] * x[0] + k[1] * x[1]);
        x = [a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u, a[1][1] * x[1] + b[1] * u];
        us.push(u);
    }
    (us, cost)
}

fn solver_oracle() -> Verdict {
    let (h, stages) = (0.1, 20);
    let model = ErrorDynamics::new(Arc::new(LinearModel::double_integrator(1)), vec![0.0, 0.0]).expect("model");
    let cfg = OcpConfig::new(
        h,
        h * stages as f64,
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
        TerminalSet::new(DMatrix::identity(2, 2), 1e6, 2e6).expect("terminal"),
        1e3,
    )
    .expect("config");
    let grid = ConstraintGrid::unconstrained(&cfg);
    let sol = solve_fhocp(&model, &[1.0, 0.0], &grid, &cfg, None).expect("solve");
    let (dp, dp_cost) = dp_inputs(h, stages, [1.0, 0.0]);
    let worst = sol
        .inputs
        .iter()
        .zip(&dp)
        .map(|(u, d)| (u[0] - d).abs())
        .fold(0.0, f64::max);
    let frozen = ORACLE_DP_INPUTS
        .iter()
        .map(|(k, v)| (dp[*k] - v).abs())
        .fold((dp_cost - ORACLE_DP_COST).abs(), f64::max);
    Verdict {
        id: 8,
        name: "solver against dynamic programming",
        pass: sol.is_feasible() && worst <= 1e-4 && frozen <= 1e-12,
        detail: format!(
            "max input error {worst:.2e}, cost {:.8} vs {dp_cost:.8}, recursion vs frozen values {frozen:.1e}",
            sol.cost
        ),
    }
}

fn iss_inequality(run: &ClosedLoop) -> Verdict {
    let (ok, line) = check_line(&run.report, "iss_decrease");
    Verdict {
        id: 9,
        name: "value decrease inequality",
        pass: ok && run.outcome.error.is_none(),
        detail: line,
    }
}

fn main() {
    let reference = load("three_unicycles.toml", None);
    let mut verdicts = Vec::new();
    verdicts.push(certificate_arithmetic());
    verdicts.push(tube_validity(&reference));
    verdicts.push(tightening_soundness(&reference));
    verdicts.push(set_algebra());
    verdicts.push(solver_oracle());

    let short = closed_loop(&reference);
    verdicts.push(reference_replay(&short));
    verdicts.push(iss_inequality(&short));
    let long = closed_loop(&load("three_unicycles.toml", Some(100.0)));
    verdicts.push(trapping(&long));
    let calm = closed_loop(&load("three_unicycles_calm.toml", None));
    verdicts.push(recursive_feasibility(&calm));

    verdicts.sort_by_key(|v| v.id);
    let mut failed = 0;
    for v in &verdicts {
        println!("{} {}. {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
