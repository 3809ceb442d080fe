//! Closed-form set algebra on Euclidean balls.
//!
//! Every set the controller reasons about (workspace, agent bodies,
//! obstacles, disturbance tubes) is a ball, so Minkowski addition and the
//! Pontryagin difference reduce to center/radius arithmetic.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Closed Euclidean ball `B(center, radius)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    center: DVector<f64>,
    radius: f64,
}

impl Ball {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Parameter(format!(
                "ball radius must be finite and nonnegative, got {radius}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parameter("ball center must be finite".into()));
        }
        Ok(Self { center, radius })
    }

    pub fn from_slice(center: &[f64], radius: f64) -> Result<Self> {
        Self::new(DVector::from_column_slice(center), radius)
    }

    pub fn origin(dim: usize, radius: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), radius)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Membership with an absolute slack `tol` on the radius.
    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        debug_assert_eq!(point.len(), self.dim());
        let d2: f64 = point
            .iter()
            .zip(self.center.iter())
            .map(|(p, c)| (p - c) * (p - c))
            .sum();
        d2.sqrt() <= self.radius + tol
    }
}

/// Result of an operation that may produce the empty set.
#[derive(Debug, Clone, PartialEq)]
pub enum BallSet {
    Ball(Ball),
    Empty,
}

impl BallSet {
    pub fn is_empty(&self) -> bool {
        matches!(self, BallSet::Empty)
    }

    pub fn ball(&self) -> Option<&Ball> {
        match self {
            BallSet::Ball(b) => Some(b),
            BallSet::Empty => None,
        }
    }
}

/// `a ⊕ b`.
pub fn minkowski_add(a: &Ball, b: &Ball) -> Result<Ball> {
    check_dim(a.dim(), b.dim())?;
    Ball::new(&a.center + &b.center, a.radius + b.radius)
}

/// `a ⊖ b`; empty when the subtrahend is wider than the minuend.
pub fn pontryagin_diff(a: &Ball, b: &Ball) -> Result<BallSet> {
    check_dim(a.dim(), b.dim())?;
    if a.radius < b.radius {
        return Ok(BallSet::Empty);
    }
    Ok(BallSet::Ball(Ball::new(
        &a.center - &b.center,
        a.radius - b.radius,
    )?))
}

/// `A ⊕ B` where either operand may already be empty.
pub fn minkowski_add_sets(a: &BallSet, b: &BallSet) -> Result<BallSet> {
    match (a, b) {
        (BallSet::Ball(a), BallSet::Ball(b)) => Ok(BallSet::Ball(minkowski_add(a, b)?)),
        _ => Ok(BallSet::Empty),
    }
}

/// `A ⊖ B` where either operand may already be empty. Anything minus the
/// empty set is unconstrained, which balls cannot represent, so that case
/// is rejected.
pub fn pontryagin_diff_sets(a: &BallSet, b: &BallSet) -> Result<BallSet> {
    match (a, b) {
        (BallSet::Ball(a), BallSet::Ball(b)) => pontryagin_diff(a, b),
        (BallSet::Empty, BallSet::Ball(_)) => Ok(BallSet::Empty),
        (_, BallSet::Empty) => Err(Error::Parameter(
            "Pontryagin difference by the empty set is the whole space".into(),
        )),
    }
}

/// Parameters of the disturbance tube: disturbance bound and the Lipschitz
/// constant of the nominal error dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeProfile {
    pub w_bar: f64,
    pub lipschitz: f64,
}

/// Below this Lipschitz constant the tube radius switches to its series
/// expansion; `expm1` alone is accurate but the division by `L` is not.
pub const LINEAR_LIMIT_LIPSCHITZ: f64 = 1e-6;

impl TubeProfile {
    pub fn new(w_bar: f64, lipschitz: f64) -> Result<Self> {
        if !(w_bar >= 0.0) || !w_bar.is_finite() {
            return Err(Error::Parameter(format!(
                "disturbance bound must be nonnegative, got {w_bar}"
            )));
        }
        if !(lipschitz >= 0.0) || !lipschitz.is_finite() {
            return Err(Error::Parameter(format!(
                "Lipschitz constant must be nonnegative, got {lipschitz}"
            )));
        }
        Ok(Self { w_bar, lipschitz })
    }

    /// Grönwall bound on the nominal/disturbed divergence after `tau`:
    /// `(w̄ / L)(e^{L τ} − 1)`.
    pub fn radius(&self, tau: f64) -> Result<f64> {
        tube_radius(self, tau)
    }
}

pub fn tube_radius(profile: &TubeProfile, tau: f64) -> Result<f64> {
    if tau < 0.0 || tau.is_nan() {
        return Err(Error::NegativeTime(tau));
    }
    let l = profile.lipschitz;
    if l < LINEAR_LIMIT_LIPSCHITZ {
        return Ok(profile.w_bar * tau * (1.0 + 0.5 * l * tau));
    }
    Ok(profile.w_bar / l * (l * tau).exp_m1())
}
