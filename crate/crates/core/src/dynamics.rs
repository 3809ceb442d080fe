//! Agent motion models, error-coordinate dynamics, fixed-step integration and
//! empirical Lipschitz estimation.
//!
//! Every model stores its position in the leading `position_dim()` state
//! components. Constraint evaluators rely on that layout.

use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Pitch magnitudes at or beyond `π/2 − PITCH_SINGULARITY_TOL` are singular.
pub const PITCH_SINGULARITY_TOL: f64 = 1e-9;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Number of leading state components holding the position.
    fn position_dim(&self) -> usize;

    /// Nominal vector field `f(z, u)`.
    fn field(&self, z: &[f64], u: &[f64], out: &mut [f64]) -> Result<()>;

    /// Row-major `∂f/∂z` (n×n) and `∂f/∂u` (n×m). The default uses central
    /// differences.
    fn jacobians(&self, z: &[f64], u: &[f64], a: &mut [f64], b: &mut [f64]) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut zp = z.to_vec();
        let mut up = u.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let step = 1e-6 * (1.0 + z[j].abs());
            zp[j] = z[j] + step;
            self.field(&zp, u, &mut fp)?;
            zp[j] = z[j] - step;
            self.field(&zp, u, &mut fm)?;
            zp[j] = z[j];
            for i in 0..n {
                a[i * n + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        for j in 0..m {
            let step = 1e-6 * (1.0 + u[j].abs());
            up[j] = u[j] + step;
            self.field(z, &up, &mut fp)?;
            up[j] = u[j] - step;
            self.field(z, &up, &mut fm)?;
            up[j] = u[j];
            for i in 0..n {
                b[i * m + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        Ok(())
    }

    /// `z − z_ref` on the model's state manifold.
    fn state_difference(&self, z: &[f64], z_ref: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(z).zip(z_ref) {
            *o = a - b;
        }
    }

    /// Rejects states outside the model's admissible region.
    fn check_state(&self, _z: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Index of the pitch angle for models with an Euler-angle singularity.
    fn pitch_index(&self) -> Option<usize> {
        None
    }

    /// State components holding velocities, which must vanish initially.
    fn velocity_range(&self) -> Option<std::ops::Range<usize>> {
        None
    }

    /// State components holding angles whose error is wrapped to `[−π, π)`.
    fn angle_indices(&self) -> Vec<usize> {
        Vec::new()
    }

    fn state_labels(&self) -> Vec<String> {
        (0..self.state_dim()).map(|i| format!("z{i}")).collect()
    }

    fn input_labels(&self) -> Vec<String> {
        (0..self.input_dim()).map(|i| format!("u{i}")).collect()
    }
}

/// Planar unicycle with state `(x, y, θ)` and input `(v, ω)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unicycle;

pub fn unicycle_field(state: &[f64; 3], input: &[f64; 2]) -> [f64; 3] {
    let (s, c) = state[2].sin_cos();
    [input[0] * c, input[0] * s, input[1]]
}

impl Dynamics for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn position_dim(&self) -> usize {
        2
    }

    fn field(&self, z: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let (s, c) = z[2].sin_cos();
        out[0] = u[0] * c;
        out[1] = u[0] * s;
        out[2] = u[1];
        Ok(())
    }

    fn jacobians(&self, z: &[f64], u: &[f64], a: &mut [f64], b: &mut [f64]) -> Result<()> {
        let (s, c) = z[2].sin_cos();
        a.fill(0.0);
        a[2] = -u[0] * s;
        a[5] = u[0] * c;
        b.fill(0.0);
        b[0] = c;
        b[2] = s;
        b[5] = 1.0;
        Ok(())
    }

    fn state_difference(&self, z: &[f64], z_ref: &[f64], out: &mut [f64]) {
        out[0] = z[0] - z_ref[0];
        out[1] = z[1] - z_ref[1];
        out[2] = wrap_angle(z[2] - z_ref[2]);
    }

    fn angle_indices(&self) -> Vec<usize> {
        vec![2]
    }

    fn state_labels(&self) -> Vec<String> {
        vec!["x".into(), "y".into(), "theta".into()]
    }

    fn input_labels(&self) -> Vec<String> {
        vec!["v".into(), "omega".into()]
    }
}

/// Block-diagonal `[I₃, J_q(q)]` mapping body rates to pose rates.
pub fn euler_rate_jacobian(q: &[f64; 3]) -> Result<DMatrix<f64>> {
    let jq = euler_rate_block(q)?;
    let mut j = DMatrix::identity(6, 6);
    for r in 0..3 {
        for c in 0..3 {
            j[(3 + r, 3 + c)] = jq[r][c];
        }
    }
    Ok(j)
}

fn euler_rate_block(q: &[f64; 3]) -> Result<[[f64; 3]; 3]> {
    let (phi, theta) = (q[0], q[1]);
    if theta.abs() >= PI / 2.0 - PITCH_SINGULARITY_TOL {
        return Err(Error::Singularity { pitch: theta });
    }
    let (sp, cp) = phi.sin_cos();
    let (tt, ct) = (theta.tan(), theta.cos());
    Ok([
        [1.0, sp * tt, cp * tt],
        [0.0, cp, -sp],
        [0.0, sp / ct, cp / ct],
    ])
}

pub type InertiaFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;
pub type CoriolisFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;
pub type GravityFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;

/// Six-DOF Lagrangian rigid body with state `(p, q, v)` (12 components) and a
/// generalized 6-D force input.
#[derive(Clone)]
pub struct RigidBody {
    inertia: Arc<InertiaFn>,
    coriolis: Arc<CoriolisFn>,
    gravity: Arc<GravityFn>,
}

impl fmt::Debug for RigidBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RigidBody")
    }
}

impl RigidBody {
    pub fn new(inertia: Arc<InertiaFn>, coriolis: Arc<CoriolisFn>, gravity: Arc<GravityFn>) -> Self {
        Self {
            inertia,
            coriolis,
            gravity,
        }
    }

    /// Constant diagonal inertia, no Coriolis coupling, and gravity `g0` along
    /// the third axis (zero for a neutrally buoyant body).
    pub fn diagonal(mass: f64, moments: [f64; 3], g0: f64) -> Result<Self> {
        if mass <= 0.0 || moments.iter().any(|&m| m <= 0.0) {
            return Err(Error::Parameter(
                "mass and moments of inertia must be positive".into(),
            ));
        }
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            mass, mass, mass, moments[0], moments[1], moments[2],
        ]));
        let mut g = DVector::zeros(6);
        g[2] = mass * g0;
        Ok(Self::new(
            Arc::new(move |_| m.clone()),
            Arc::new(|_, _| DMatrix::zeros(6, 6)),
            Arc::new(move |_| g.clone()),
        ))
    }
}

/// `ẋ = J(q) v`, `v̇ = M⁻¹(−C v − g + u)` evaluated at one state.
pub fn rigid_body_field(body: &RigidBody, z: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    check_dim(12, z.len())?;
    check_dim(6, u.len())?;
    let x = &z[..6];
    let v = DVector::from_column_slice(&z[6..12]);
    let j = euler_rate_jacobian(&[z[3], z[4], z[5]])?;
    let xdot = &j * &v;
    let m = (body.inertia)(x);
    let chol = m.cholesky().ok_or_else(|| {
        Error::Parameter("inertia matrix is not positive definite at this state".into())
    })?;
    let c = (body.coriolis)(x, xdot.as_slice());
    let g = (body.gravity)(x);
    let rhs = -(&c * &v) - g + DVector::from_column_slice(u);
    let vdot = chol.solve(&rhs);
    out[..6].copy_from_slice(xdot.as_slice());
    out[6..].copy_from_slice(vdot.as_slice());
    Ok(())
}

impl Dynamics for RigidBody {
    fn state_dim(&self) -> usize {
        12
    }
    fn input_dim(&self) -> usize {
        6
    }
    fn position_dim(&self) -> usize {
        3
    }

    fn field(&self, z: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        rigid_body_field(self, z, u, out)
    }

    fn state_difference(&self, z: &[f64], z_ref: &[f64], out: &mut [f64]) {
        for i in 0..12 {
            out[i] = z[i] - z_ref[i];
        }
        out[3] = wrap_angle(out[3]);
        out[5] = wrap_angle(out[5]);
    }

    fn check_state(&self, z: &[f64]) -> Result<()> {
        if z[4].abs() >= PI / 2.0 - PITCH_SINGULARITY_TOL {
            return Err(Error::Singularity { pitch: z[4] });
        }
        Ok(())
    }

    fn pitch_index(&self) -> Option<usize> {
        Some(4)
    }

    fn velocity_range(&self) -> Option<std::ops::Range<usize>> {
        Some(6..12)
    }

    fn angle_indices(&self) -> Vec<usize> {
        vec![3, 4, 5]
    }

    fn state_labels(&self) -> Vec<String> {
        ["x", "y", "z", "phi", "theta", "psi", "vx", "vy", "vz", "wx", "wy", "wz"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn input_labels(&self) -> Vec<String> {
        ["fx", "fy", "fz", "tx", "ty", "tz"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Linear time-invariant model `ż = A z + B u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    position_dim: usize,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, position_dim: usize) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Parameter("A must be square".into()));
        }
        check_dim(a.nrows(), b.nrows())?;
        if position_dim > a.nrows() {
            return Err(Error::Parameter("position_dim exceeds state dimension".into()));
        }
        Ok(Self { a, b, position_dim })
    }

    /// `dim` decoupled double integrators: positions first, then velocities.
    pub fn double_integrator(dim: usize) -> Self {
        let n = 2 * dim;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, dim);
        for k in 0..dim {
            a[(k, dim + k)] = 1.0;
            b[(dim + k, k)] = 1.0;
        }
        Self {
            a,
            b,
            position_dim: dim,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl Dynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn position_dim(&self) -> usize {
        self.position_dim
    }

    fn field(&self, z: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * z[j];
            }
            for j in 0..m {
                acc += self.b[(i, j)] * u[j];
            }
            out[i] = acc;
        }
        Ok(())
    }

    fn jacobians(&self, _z: &[f64], _u: &[f64], a: &mut [f64], b: &mut [f64]) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = self.a[(i, j)];
            }
            for j in 0..m {
                b[i * m + j] = self.b[(i, j)];
            }
        }
        Ok(())
    }
}

/// Error coordinates `e = z − z_des` with `g(e, u) = f(e + z_des, u)`.
#[derive(Debug, Clone)]
pub struct ErrorDynamics {
    model: Arc<dyn Dynamics>,
    z_des: Vec<f64>,
}

impl ErrorDynamics {
    pub fn new(model: Arc<dyn Dynamics>, z_des: Vec<f64>) -> Result<Self> {
        check_dim(model.state_dim(), z_des.len())?;
        Ok(Self { model, z_des })
    }

    pub fn model(&self) -> &Arc<dyn Dynamics> {
        &self.model
    }

    pub fn reference(&self) -> &[f64] {
        &self.z_des
    }

    /// `e(z) = z ⊖ z_des` using the model's state difference.
    pub fn error_of(&self, z: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; z.len()];
        self.model.state_difference(z, &self.z_des, &mut e);
        e
    }

    /// Absolute state `e + z_des`.
    pub fn state_of(&self, e: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(e).zip(&self.z_des) {
            *o = a + b;
        }
    }

    fn shifted(&self, e: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; e.len()];
        self.state_of(e, &mut z);
        z
    }
}

/// `g(e, u) = f(e + z_des, u)`.
pub fn error_field(err: &ErrorDynamics, e: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    err.field(e, u, out)
}

impl Dynamics for ErrorDynamics {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn position_dim(&self) -> usize {
        self.model.position_dim()
    }

    fn field(&self, e: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.field(&self.shifted(e), u, out)
    }

    fn jacobians(&self, e: &[f64], u: &[f64], a: &mut [f64], b: &mut [f64]) -> Result<()> {
        self.model.jacobians(&self.shifted(e), u, a, b)
    }

    fn state_difference(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        self.model.state_difference(a, b, out)
    }

    fn check_state(&self, e: &[f64]) -> Result<()> {
        self.model.check_state(&self.shifted(e))
    }

    fn pitch_index(&self) -> Option<usize> {
        self.model.pitch_index()
    }

    fn velocity_range(&self) -> Option<std::ops::Range<usize>> {
        self.model.velocity_range()
    }

    fn angle_indices(&self) -> Vec<usize> {
        self.model.angle_indices()
    }

    fn state_labels(&self) -> Vec<String> {
        self.model.state_labels()
    }

    fn input_labels(&self) -> Vec<String> {
        self.model.input_labels()
    }
}

/// Vector-valued disturbance generator that writes `w(z, t)` into its output.
pub type DisturbanceFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// Bounded additive disturbance. Samples whose norm exceeds the bound are
/// scaled back onto the bound and counted.
#[derive(Clone)]
pub struct DisturbanceSignal {
    generator: Arc<DisturbanceFn>,
    bound: f64,
    clipped: Arc<AtomicUsize>,
}

impl fmt::Debug for DisturbanceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbanceSignal")
            .field("bound", &self.bound)
            .field("clipped", &self.clipped_samples())
            .finish()
    }
}

impl DisturbanceSignal {
    pub fn new(generator: Arc<DisturbanceFn>, bound: f64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::Parameter(format!(
                "disturbance bound must be nonnegative, got {bound}"
            )));
        }
        Ok(Self {
            generator,
            bound,
            clipped: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// `amplitude · sin(frequency · t) · direction`.
    pub fn sinusoid(amplitude: f64, frequency: f64, direction: Vec<f64>, bound: f64) -> Result<Self> {
        Self::new(
            Arc::new(move |_z: &[f64], t: f64, out: &mut [f64]| {
                let s = amplitude * (frequency * t).sin();
                for (o, d) in out.iter_mut().zip(&direction) {
                    *o = s * d;
                }
            }),
            bound,
        )
    }

    /// Piecewise-constant random disturbance with norm at most `bound`,
    /// drawn per window of length `period` on `[0, horizon]` and held after.
    pub fn piecewise_random(dim: usize, bound: f64, period: f64, horizon: f64, seed: u64) -> Result<Self> {
        if period <= 0.0 {
            return Err(Error::Parameter("disturbance period must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows = (horizon / period).ceil() as usize + 1;
        let table: Vec<Vec<f64>> = (0..windows)
            .map(|_| sample_ball(&mut rng, dim, bound))
            .collect();
        Self::new(
            Arc::new(move |_z: &[f64], t: f64, out: &mut [f64]| {
                let k = ((t / period).floor().max(0.0) as usize).min(table.len() - 1);
                out.copy_from_slice(&table[k]);
            }),
            bound,
        )
    }

    pub fn zero(bound: f64) -> Result<Self> {
        Self::new(Arc::new(|_z: &[f64], _t: f64, out: &mut [f64]| out.fill(0.0)), bound)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn clipped_samples(&self) -> usize {
        self.clipped.load(Ordering::Relaxed)
    }

    /// Writes the (clipped) disturbance and returns its norm.
    pub fn sample(&self, z: &[f64], t: f64, out: &mut [f64]) -> f64 {
        (self.generator)(z, t, out);
        let n = linalg::norm(out);
        if n > self.bound {
            if self.clipped.fetch_add(1, Ordering::Relaxed) == 0 {
                log::warn!(
                    "disturbance norm {n:.6} exceeds bound {:.6}; clipping to the bound",
                    self.bound
                );
            }
            let scale = if n > 0.0 { self.bound / n } else { 0.0 };
            out.iter_mut().for_each(|o| *o *= scale);
            return self.bound;
        }
        n
    }
}

/// Uniform sample from the `dim`-ball of radius `r`.
pub fn sample_ball<R: Rng>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if linalg::norm(&p) <= 1.0 {
            return p.into_iter().map(|x| x * r).collect();
        }
    }
}

/// Piecewise-constant input signal: `values[k]` applies on
/// `[t0 + k·period, t0 + (k+1)·period)`, the last value is held after.
#[derive(Debug, Clone, PartialEq)]
pub struct ZohInput {
    pub period: f64,
    pub values: Vec<Vec<f64>>,
}

impl ZohInput {
    pub fn constant(u: Vec<f64>) -> Self {
        Self {
            period: f64::INFINITY,
            values: vec![u],
        }
    }

    pub fn stage_at(&self, elapsed: f64) -> usize {
        if !self.period.is_finite() {
            return 0;
        }
        let k = ((elapsed / self.period) + 1e-9).floor().max(0.0) as usize;
        k.min(self.values.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Norm of the applied disturbance at each grid point (zero when nominal).
    pub disturbance_norms: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Scratch space for one RK4 step.
#[derive(Debug, Clone)]
pub struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    w: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
            w: vec![0.0; n],
        }
    }
}

/// One classical RK4 step of `ż = f(z, u) + w(z, t)` with `u` held constant.
pub fn rk4_step(
    model: &dyn Dynamics,
    z: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    disturbance: Option<&DisturbanceSignal>,
    work: &mut Rk4Work,
    out: &mut [f64],
) -> Result<()> {
    let n = z.len();
    let nodes = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            work.tmp.copy_from_slice(z);
        } else {
            let (prev, _) = work.k.split_at(s);
            let kp = &prev[s - 1];
            for i in 0..n {
                work.tmp[i] = z[i] + nodes[s] * dt * kp[i];
            }
        }
        model.check_state(&work.tmp)?;
        model.field(&work.tmp, u, &mut work.k[s])?;
        if let Some(d) = disturbance {
            d.sample(&work.tmp, t + nodes[s] * dt, &mut work.w);
            for i in 0..n {
                work.k[s][i] += work.w[i];
            }
        }
    }
    for i in 0..n {
        out[i] = z[i]
            + dt / 6.0 * (work.k[0][i] + 2.0 * work.k[1][i] + 2.0 * work.k[2][i] + work.k[3][i]);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            stage: 0,
            detail: format!("non-finite state after RK4 step at t = {t}"),
        });
    }
    Ok(())
}

/// Integrates from `t0` to `t1` with fixed RK4 steps of length `step`,
/// returning every grid point.
pub fn integrate(
    model: &dyn Dynamics,
    z0: &[f64],
    input: &ZohInput,
    disturbance: Option<&DisturbanceSignal>,
    t0: f64,
    t1: f64,
    step: f64,
) -> Result<Trajectory> {
    check_dim(model.state_dim(), z0.len())?;
    if input.values.is_empty() {
        return Err(Error::Parameter("input signal has no values".into()));
    }
    for u in &input.values {
        check_dim(model.input_dim(), u.len())?;
    }
    if !(t1 >= t0) {
        return Err(Error::NegativeTime(t1 - t0));
    }
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("integration step must be positive, got {step}")));
    }
    let span = t1 - t0;
    let count = (span / step).round() as usize;
    if (count as f64 * step - span).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "step {step} does not divide the interval length {span}"
        )));
    }

    let n = z0.len();
    let mut work = Rk4Work::new(n);
    let mut times = Vec::with_capacity(count + 1);
    let mut states = Vec::with_capacity(count + 1);
    let mut norms = Vec::with_capacity(count + 1);
    let mut wbuf = vec![0.0; n];
    let wnorm = |z: &[f64], t: f64, buf: &mut [f64]| disturbance.map_or(0.0, |d| d.sample(z, t, buf));

    model.check_state(z0).map_err(|_| Error::SingularTrajectory {
        time: t0,
        pitch: model.pitch_index().map_or(f64::NAN, |i| z0[i]),
    })?;
    times.push(t0);
    states.push(z0.to_vec());
    norms.push(wnorm(z0, t0, &mut wbuf));

    let mut z = z0.to_vec();
    let mut next = vec![0.0; n];
    for k in 0..count {
        let t = t0 + k as f64 * step;
        let u = &input.values[input.stage_at(k as f64 * step)];
        rk4_step(model, &z, u, t, step, disturbance, &mut work, &mut next).map_err(|e| match e {
            Error::Singularity { pitch } => Error::SingularTrajectory { time: t, pitch },
            other => other,
        })?;
        std::mem::swap(&mut z, &mut next);
        let tn = t0 + (k + 1) as f64 * step;
        times.push(tn);
        norms.push(wnorm(&z, tn, &mut wbuf));
        states.push(z.clone());
    }
    Ok(Trajectory {
        times,
        states,
        disturbance_norms: norms,
    })
}

/// Box of states and an input-norm bound over which Lipschitz constants are
/// estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzRegion {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub input_bound: f64,
}

pub const DEFAULT_LIPSCHITZ_SAFETY: f64 = 1.1;

/// Largest sampled difference quotient `‖f(z,u) − f(z′,u)‖ / ‖z − z′‖`,
/// inflated by `safety`. Half of the pairs are drawn independently across
/// the region and half as close neighbours, which captures the local slope.
pub fn estimate_lipschitz(
    model: &dyn Dynamics,
    region: &LipschitzRegion,
    sample_count: usize,
    seed: u64,
    safety: f64,
) -> Result<f64> {
    let n = model.state_dim();
    let m = model.input_dim();
    check_dim(n, region.state_lo.len())?;
    check_dim(n, region.state_hi.len())?;
    if sample_count < 2 {
        return Err(Error::Parameter("need at least two Lipschitz samples".into()));
    }
    if region
        .state_lo
        .iter()
        .zip(&region.state_hi)
        .any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite())
        || !(region.input_bound >= 0.0)
    {
        return Err(Error::Parameter("Lipschitz region is degenerate or unbounded".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        region
            .state_lo
            .iter()
            .zip(&region.state_hi)
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect()
    };
    let mut fa = vec![0.0; n];
    let mut fb = vec![0.0; n];
    let mut best: f64 = 0.0;
    for k in 0..sample_count {
        let za = draw(&mut rng);
        let zb = if k % 2 == 0 {
            draw(&mut rng)
        } else {
            za.iter()
                .zip(region.state_lo.iter().zip(&region.state_hi))
                .map(|(z, (lo, hi))| z + 1e-4 * (hi - lo) * rng.random_range(-1.0..=1.0))
                .collect()
        };
        let u = sample_ball(&mut rng, m, region.input_bound);
        let dz = linalg::distance(&za, &zb);
        if dz <= 0.0 {
            continue;
        }
        if model.field(&za, &u, &mut fa).is_err() || model.field(&zb, &u, &mut fb).is_err() {
            continue;
        }
        best = best.max(linalg::distance(&fa, &fb) / dz);
    }
    Ok(best * safety)
}
