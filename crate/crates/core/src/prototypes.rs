//! Learnable ideal-point prototypes and soft assignment to them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{busemann_raw, check_within_clamp, norm_sq, BallPoint, IDEAL_NORM_TOL};

/// `K` unit vectors in `ℝᵈ`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

/// A probability vector over the `K` prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentVector(Vec<f64>);

/// Softmax temperature τ > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    /// Target-view temperature τ_t.
    pub const TARGET: Temperature = Temperature(0.0625);
    /// Anchor-view temperature τ_a.
    pub const ANCHOR: Temperature = Temperature(0.25);

    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::config(format!(
                "temperature must be finite and > 0, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl PrototypeSet {
    /// Draws `k` rows from an isotropic Gaussian and normalizes them, which
    /// is uniform on the sphere.
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self> {
        check_shape(k, d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k {
            let row: Vec<f64> = loop {
                let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                if norm_sq(&row) > 1e-12 {
                    break row;
                }
            };
            let n = norm_sq(&row).sqrt();
            data.extend(row.iter().map(|x| x / n));
        }
        Ok(Self { k, d, data })
    }

    /// Builds a set from explicit rows, each of which must be unit norm.
    pub fn from_rows(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(k, d)?;
        if data.len() != k * d {
            return Err(Error::DimensionMismatch {
                what: "prototype matrix length".into(),
                expected: k * d,
                found: data.len(),
            });
        }
        let set = Self { k, d, data };
        for (i, row) in set.rows().enumerate() {
            let n = norm_sq(row).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > IDEAL_NORM_TOL {
                return Err(Error::invalid(format!("prototype row {i} has norm {n}")));
            }
        }
        Ok(set)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.rows().map(|r| (norm_sq(r).sqrt() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Busemann values `b_{c_k}(z)` for every prototype.
    pub fn busemann_vector(&self, z: &BallPoint) -> Result<Vec<f64>> {
        self.busemann_slice(z.coords())
    }

    pub(crate) fn busemann_slice(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch {
                what: "embedding dimension vs prototypes".into(),
                expected: self.d,
                found: z.len(),
            });
        }
        check_within_clamp(z)?;
        Ok(self.rows().map(|c| busemann_raw(c, z)).collect())
    }

    /// `softmax(−b(z)/τ)`.
    pub fn assign(&self, z: &BallPoint, tau: Temperature) -> Result<AssignmentVector> {
        self.assign_slice(z.coords(), tau)
    }

    pub(crate) fn assign_slice(&self, z: &[f64], tau: Temperature) -> Result<AssignmentVector> {
        let b = self.busemann_slice(z)?;
        let logits: Vec<f64> = b.iter().map(|x| -x / tau.value()).collect();
        Ok(AssignmentVector(softmax(&logits)))
    }
}

fn check_shape(k: usize, d: usize) -> Result<()> {
    if k < 2 || d < 2 {
        return Err(Error::config(format!(
            "prototype set needs K ≥ 2 and d ≥ 2, got K={k}, d={d}"
        )));
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

impl AssignmentVector {
    /// Accepts nonnegative finite entries summing to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("assignment vector is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("assignment entries must be finite and ≥ 0"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("assignment entries sum to {s}, not 1")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn dot(&self, other: &AssignmentVector) -> f64 {
        crate::geometry::dot(&self.0, &other.0)
    }
}

/// Arithmetic mean of assignment vectors.
pub fn mean_assignment<'a, I>(assignments: I) -> Result<AssignmentVector>
where
    I: IntoIterator<Item = &'a AssignmentVector>,
{
    let mut iter = assignments.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("mean of an empty list of assignments"))?;
    let mut sum = first.0.clone();
    let mut n = 1usize;
    for a in iter {
        if a.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                what: "assignment length".into(),
                expected: sum.len(),
                found: a.len(),
            });
        }
        sum.iter_mut().zip(&a.0).for_each(|(s, x)| *s += x);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(AssignmentVector(sum))
}
