//! Poincaré ball geometry with curvature `-κ`.
//!
//! The ball of curvature κ is `{ z ∈ ℝᵈ : κ‖z‖² < 1 }`, with radius `r = 1/√κ`.
//! Everything here is evaluated in `f64`; embeddings produced in lower
//! precision should be promoted before they reach these functions, since the
//! Busemann function loses digits quickly near the boundary.
//!
//! Points that come out of an operation are always passed through
//! [`project_to_ball`] with [`EPS_BALL`], so every [`BallPoint`] handed back to
//! the caller satisfies `√κ‖z‖ ≤ 1 - EPS_BALL`.

use crate::error::{Error, Result};

/// Relative margin kept between embeddings and the ball boundary.
pub const EPS_BALL: f64 = 1e-5;

/// Below this tangent norm the exponential map returns its base point.
pub const EXP_MAP_MIN_NORM: f64 = 1e-12;

/// Tolerance on `‖c‖ = 1` for ideal points.
pub const IDEAL_NORM_TOL: f64 = 1e-9;

/// Magnitude κ > 0 of the (negative) sectional curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::config(format!("curvature must be finite and > 0, got {kappa}")));
        }
        Ok(Self(kappa))
    }

    /// The unit ball, κ = 1.
    pub const fn unit() -> Self {
        Self(1.0)
    }

    /// Curvature of the ball with the given radius (κ = 1/r²).
    pub fn from_radius(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::config(format!("radius must be finite and > 0, got {radius}")));
        }
        Self::new(1.0 / (radius * radius))
    }

    pub fn kappa(self) -> f64 {
        self.0
    }

    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self::unit()
    }
}

/// A point strictly inside the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    /// Wraps `coords`, rejecting non-finite entries and points on or outside
    /// the boundary. No projection is applied.
    pub fn new(coords: Vec<f64>, k: Curvature) -> Result<Self> {
        check_finite(&coords, "ball point")?;
        let sq = k.kappa() * norm_sq(&coords);
        if sq >= 1.0 {
            return Err(Error::invalid(format!(
                "point with κ‖z‖² = {sq} is not inside the ball"
            )));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }
}

/// A tangent vector; the ball is flat enough in the tangent space that any
/// finite vector is admissible.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite(&coords, "tangent vector")?;
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }
}

/// A point on the boundary sphere of the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealPoint(Vec<f64>);

impl IdealPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite(&coords, "ideal point")?;
        let n = norm_sq(&coords).sqrt();
        if (n - 1.0).abs() > IDEAL_NORM_TOL {
            return Err(Error::invalid(format!("ideal point must have unit norm, got {n}")));
        }
        Ok(Self(coords))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn from_direction(v: &[f64]) -> Result<Self> {
        check_finite(v, "ideal point")?;
        let n = norm_sq(v).sqrt();
        if n == 0.0 {
            return Err(Error::invalid("cannot normalize a zero vector onto the sphere"));
        }
        Ok(Self(v.iter().map(|x| x / n).collect()))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// slice-level kernels

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite coordinate at index {i}")));
    }
    Ok(())
}

fn check_same_dim(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Largest admissible Euclidean norm for a ball point.
pub fn clamp_radius(k: Curvature, eps: f64) -> f64 {
    (1.0 - eps) / k.kappa().sqrt()
}

/// Rescales in place onto the clamp radius if needed; returns whether it did.
pub(crate) fn project_in_place(z: &mut [f64], kappa: f64, eps: f64) -> bool {
    let n = norm_sq(z).sqrt();
    let max = (1.0 - eps) / kappa.sqrt();
    if n * kappa.sqrt() <= 1.0 - eps {
        return false;
    }
    let s = max / n;
    z.iter_mut().for_each(|x| *x *= s);
    true
}

pub(crate) fn mobius_add_raw(x: &[f64], y: &[f64], kappa: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let cx = 1.0 + 2.0 * kappa * xy + kappa * y2;
    let cy = 1.0 - kappa * x2;
    let den = 1.0 + 2.0 * kappa * xy + kappa * kappa * x2 * y2;
    x.iter().zip(y).map(|(a, b)| (cx * a + cy * b) / den).collect()
}

/// `tanh(√κ‖v‖)/(√κ‖v‖) · v`, i.e. the exponential map at the origin before
/// projection.
pub(crate) fn exp_map0_raw(v: &[f64], kappa: f64) -> Vec<f64> {
    let n = norm_sq(v).sqrt();
    if n < EXP_MAP_MIN_NORM {
        return v.to_vec();
    }
    let sn = kappa.sqrt() * n;
    let f = sn.tanh() / sn;
    v.iter().map(|x| f * x).collect()
}

/// Unit-ball Busemann function `log(‖c − z‖² / (1 − ‖z‖²))`.
pub(crate) fn busemann_raw(c: &[f64], z: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut z2 = 0.0;
    for (ci, zi) in c.iter().zip(z) {
        diff += (ci - zi) * (ci - zi);
        z2 += zi * zi;
    }
    (diff / (1.0 - z2)).ln()
}

// ---------------------------------------------------------------------------
// public operations

/// Möbius addition `x ⊕_κ y`, projected into the ball.
pub fn mobius_add(x: &BallPoint, y: &BallPoint, k: Curvature) -> Result<BallPoint> {
    check_same_dim(x.dim(), y.dim(), "mobius_add operands")?;
    let mut out = mobius_add_raw(&x.0, &y.0, k.kappa());
    check_finite(&out, "mobius_add result")?;
    project_in_place(&mut out, k.kappa(), EPS_BALL);
    Ok(BallPoint(out))
}

/// Geodesic distance `(2/√κ)·artanh(√κ‖−z₁ ⊕_κ z₂‖)`.
pub fn geodesic_distance(z1: &BallPoint, z2: &BallPoint, k: Curvature) -> Result<f64> {
    check_same_dim(z1.dim(), z2.dim(), "geodesic_distance operands")?;
    if z1 == z2 {
        return Ok(0.0);
    }
    let neg: Vec<f64> = z1.0.iter().map(|x| -x).collect();
    let m = mobius_add_raw(&neg, &z2.0, k.kappa());
    let sk = k.kappa().sqrt();
    // argument can round to ≥ 1 only for points past the clamp radius
    let arg = (sk * norm_sq(&m).sqrt()).min(1.0 - f64::EPSILON);
    Ok(2.0 / sk * arg.atanh())
}

/// Distance from the origin, `(2/√κ)·artanh(√κ‖z‖)`.
pub fn distance_from_origin(z: &[f64], k: Curvature) -> f64 {
    let sk = k.kappa().sqrt();
    let arg = (sk * norm_sq(z).sqrt()).min(1.0 - f64::EPSILON);
    2.0 / sk * arg.atanh()
}

/// Exponential map at `z` applied to the tangent vector `v`.
///
/// A tangent vector with norm below [`EXP_MAP_MIN_NORM`] maps to `z` itself.
pub fn exp_map(z: &BallPoint, v: &TangentVector, k: Curvature) -> Result<BallPoint> {
    check_same_dim(z.dim(), v.0.len(), "exp_map base point and tangent vector")?;
    let n = v.norm();
    if n < EXP_MAP_MIN_NORM {
        return Ok(z.clone());
    }
    let kappa = k.kappa();
    let sk = kappa.sqrt();
    let lambda_den = 1.0 - kappa * norm_sq(&z.0);
    let scale = (sk * n / lambda_den).tanh() / (sk * n);
    let step: Vec<f64> = v.0.iter().map(|x| scale * x).collect();
    let mut out = mobius_add_raw(&z.0, &step, kappa);
    check_finite(&out, "exp_map result")?;
    project_in_place(&mut out, kappa, EPS_BALL);
    Ok(BallPoint(out))
}

/// Exponential map at the origin.
pub fn exp_map0(v: &TangentVector, k: Curvature) -> BallPoint {
    let mut out = exp_map0_raw(&v.0, k.kappa());
    project_in_place(&mut out, k.kappa(), EPS_BALL);
    BallPoint(out)
}

/// Scalar `4/(1 − κ‖z‖²)²` multiplying the Euclidean metric at `z`.
pub fn conformal_factor(z: &BallPoint, k: Curvature) -> f64 {
    let den = 1.0 - k.kappa() * norm_sq(&z.0);
    4.0 / (den * den)
}

/// Rescales `z_raw` onto radius `(1 − eps)/√κ` if it lies beyond it; interior
/// points are returned unchanged.
pub fn project_to_ball(z_raw: &[f64], k: Curvature, eps: f64) -> Result<BallPoint> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(format!("projection eps must lie in (0, 1), got {eps}")));
    }
    check_finite(z_raw, "projection input")?;
    let mut out = z_raw.to_vec();
    project_in_place(&mut out, k.kappa(), eps);
    Ok(BallPoint(out))
}

/// Busemann function of the ideal point `c` evaluated at `z` (unit ball).
///
/// `z` must already lie within the clamp radius `1 − EPS_BALL`.
pub fn busemann(c: &IdealPoint, z: &BallPoint) -> Result<f64> {
    check_same_dim(c.0.len(), z.dim(), "busemann prototype and point")?;
    check_within_clamp(&z.0)?;
    Ok(busemann_raw(&c.0, &z.0))
}

pub(crate) fn check_within_clamp(z: &[f64]) -> Result<()> {
    let n = norm_sq(z).sqrt();
    // allow the rounding slack left behind by a projection onto the clamp radius
    if n > (1.0 - EPS_BALL) * (1.0 + 4.0 * f64::EPSILON) {
        return Err(Error::invalid(format!(
            "point norm {n} exceeds the clamp radius {}; project it first",
            1.0 - EPS_BALL
        )));
    }
    Ok(())
}
