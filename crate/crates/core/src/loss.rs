//! The self-supervised objective over prototype assignments.
//!
//! For `B` targets with `M` anchors each (`N = B·M` anchor views):
//!
//! ```text
//! L = (1/N) Σ H(p⁺_i, p_im) − λ H(p̄) + β (1/N) Σ H(p_im),   p̄ = (1/N) Σ p_im
//! ```
//!
//! Targets are constants under differentiation: gradients flow only into the
//! anchor assignments.

use crate::error::{Error, Result};
use crate::prototypes::{mean_assignment, AssignmentVector};

/// Lower clamp applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("beta", beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(Self { lambda, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            beta: 0.25,
        }
    }
}

/// Target assignments `p⁺_i` and their anchors `p_im`.
#[derive(Debug, Clone)]
pub struct BatchAssignments {
    targets: Vec<AssignmentVector>,
    anchors: Vec<Vec<AssignmentVector>>,
}

impl BatchAssignments {
    pub fn new(targets: Vec<AssignmentVector>, anchors: Vec<Vec<AssignmentVector>>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("batch has no targets"));
        }
        if targets.len() != anchors.len() {
            return Err(Error::DimensionMismatch {
                what: "anchor groups per target".into(),
                expected: targets.len(),
                found: anchors.len(),
            });
        }
        let k = targets[0].len();
        let m = anchors[0].len();
        if m == 0 {
            return Err(Error::invalid("batch has no anchors"));
        }
        for group in &anchors {
            if group.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "anchors per target".into(),
                    expected: m,
                    found: group.len(),
                });
            }
        }
        for p in targets.iter().chain(anchors.iter().flatten()) {
            if p.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "assignment length".into(),
                    expected: k,
                    found: p.len(),
                });
            }
        }
        Ok(Self { targets, anchors })
    }

    pub fn b(&self) -> usize {
        self.targets.len()
    }

    pub fn m(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn k(&self) -> usize {
        self.targets[0].len()
    }

    pub fn targets(&self) -> &[AssignmentVector] {
        &self.targets
    }

    pub fn anchors(&self) -> &[Vec<AssignmentVector>] {
        &self.anchors
    }
}

/// The three parts of the objective, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Mean anchor–target cross-entropy.
    pub cross_entropy: f64,
    /// Entropy of the mean anchor assignment, `H(p̄)`.
    pub mean_entropy: f64,
    /// Mean anchor entropy.
    pub anchor_entropy: f64,
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

fn check_len(p: &AssignmentVector, q: &AssignmentVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "assignment length".into(),
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(())
}

/// `H(p, q) = −Σ p_k log q_k`.
pub fn cross_entropy(p: &AssignmentVector, q: &AssignmentVector) -> Result<f64> {
    check_len(p, q)?;
    Ok(cross_entropy_raw(p.probs(), q.probs()))
}

pub(crate) fn cross_entropy_raw(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| a * clamped_ln(*b)).sum::<f64>()
}

/// `H(p) = −Σ p_k log p_k`.
pub fn entropy(p: &AssignmentVector) -> f64 {
    entropy_raw(p.probs())
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter().map(|a| a * clamped_ln(*a)).sum::<f64>()
}

pub fn hmsn_loss(batch: &BatchAssignments, w: LossWeights) -> f64 {
    hmsn_loss_terms(batch, w).total
}

pub fn hmsn_loss_terms(batch: &BatchAssignments, w: LossWeights) -> LossTerms {
    let n = (batch.b() * batch.m()) as f64;
    let mut ce = 0.0;
    let mut ae = 0.0;
    for (t, group) in batch.targets.iter().zip(&batch.anchors) {
        for a in group {
            ce += cross_entropy_raw(t.probs(), a.probs());
            ae += entropy_raw(a.probs());
        }
    }
    ce /= n;
    ae /= n;
    let mean = mean_assignment(batch.anchors.iter().flatten()).expect("batch is nonempty");
    let me = entropy_raw(mean.probs());
    LossTerms {
        total: ce - w.lambda * me + w.beta * ae,
        cross_entropy: ce,
        mean_entropy: me,
        anchor_entropy: ae,
    }
}

/// Gradients of the objective with respect to each anchor assignment.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// `∂L/∂p_im`, indexed `[i][m][k]`.
    pub anchor_probs: Vec<Vec<Vec<f64>>>,
    /// `∂L/∂s_im` for the softmax logits `s_im` that produced `p_im`.
    pub anchor_logits: Vec<Vec<Vec<f64>>>,
}

/// Analytic gradients of [`hmsn_loss`]. Target assignments are held fixed,
/// so no target gradient is produced.
pub fn hmsn_loss_backward(batch: &BatchAssignments, w: LossWeights) -> LossGradients {
    let anchor_probs = prob_gradients(batch, w);
    let anchor_logits = anchor_probs
        .iter()
        .zip(&batch.anchors)
        .map(|(gs, ps)| gs.iter().zip(ps).map(|(g, p)| softmax_vjp(p.probs(), g)).collect())
        .collect();
    LossGradients {
        anchor_probs,
        anchor_logits,
    }
}

pub(crate) fn prob_gradients(batch: &BatchAssignments, w: LossWeights) -> Vec<Vec<Vec<f64>>> {
    let n = (batch.b() * batch.m()) as f64;
    let mean = mean_assignment(batch.anchors.iter().flatten()).expect("batch is nonempty");
    // d(-λH(p̄))/dp_im,k = λ (ln p̄_k + 1) / N
    let mean_term: Vec<f64> = mean
        .probs()
        .iter()
        .map(|pk| w.lambda * (dclamped_xlnx(*pk)) / n)
        .collect();
    batch
        .targets
        .iter()
        .zip(&batch.anchors)
        .map(|(t, group)| {
            group
                .iter()
                .map(|a| {
                    a.probs()
                        .iter()
                        .zip(t.probs())
                        .zip(&mean_term)
                        .map(|((q, p), mt)| {
                            let dce = if *q > LOG_CLAMP { -p / q } else { 0.0 };
                            let dent = -dclamped_xlnx(*q);
                            dce / n + mt + w.beta * dent / n
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Derivative of `x·ln(max(x, LOG_CLAMP))`.
fn dclamped_xlnx(x: f64) -> f64 {
    if x > LOG_CLAMP {
        x.ln() + 1.0
    } else {
        LOG_CLAMP.ln()
    }
}

/// Vector–Jacobian product of softmax: `p ⊙ (g − ⟨g, p⟩)`.
pub(crate) fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(a, b)| a * (b - inner)).collect()
}
