//! Adam for the encoder, Adam on the unit sphere for prototypes, and the
//! warmup + cosine learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::dot;
use crate::prototypes::PrototypeSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_OPT: f64 = 1e-8;

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(params: &[Tensor]) -> Self {
        Self::new(params.iter().map(Tensor::len))
    }

    fn check(&self, sizes: &[usize]) -> Result<()> {
        if self.m.len() != sizes.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer state tensor count".into(),
                expected: self.m.len(),
                found: sizes.len(),
            });
        }
        for (i, n) in sizes.iter().enumerate() {
            if self.m[i].len() != *n || self.v[i].len() != *n {
                return Err(Error::DimensionMismatch {
                    what: format!("optimizer state for tensor {i}"),
                    expected: self.m[i].len(),
                    found: *n,
                });
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update, `θ ← θ − lr·m̂/(√v̂ + ε)`.
///
/// `names` labels the tensors for the non-finite-gradient diagnostic.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    names: &[&str],
) -> Result<()> {
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    state.check(&sizes)?;
    if grads.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient tensor count".into(),
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != sizes[i] {
            return Err(Error::DimensionMismatch {
                what: format!("gradient for tensor {i}"),
                expected: sizes[i],
                found: g.len(),
            });
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            let name = names.get(i).copied().unwrap_or("<unnamed>");
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let (c1, c2) = bias_corrections(state.step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            let gj = g.data()[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            p.data_mut()[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS_OPT);
        }
    }
    Ok(())
}

fn bias_corrections(step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t))
}

/// Switches for the two manifold steps of [`sphere_adam_step_with`].
#[derive(Debug, Clone, Copy)]
pub struct SphereOptions {
    pub project: bool,
    pub retract: bool,
}

impl Default for SphereOptions {
    fn default() -> Self {
        Self {
            project: true,
            retract: true,
        }
    }
}

/// Adam on the unit sphere: per row, project the gradient onto the tangent
/// space (`g − ⟨g, c⟩c`), run the Adam recurrences, then retract by
/// renormalizing.
pub fn sphere_adam_step(protos: &mut PrototypeSet, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    sphere_adam_step_with(protos, grads, state, lr, SphereOptions::default())
}

pub fn sphere_adam_step_with(
    protos: &mut PrototypeSet,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    opts: SphereOptions,
) -> Result<()> {
    let (k, d) = (protos.k(), protos.dim());
    state.check(&[k * d])?;
    if grads.len() != k * d {
        return Err(Error::DimensionMismatch {
            what: "prototype gradient".into(),
            expected: k * d,
            found: grads.len(),
        });
    }
    if grads.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient("prototypes".into()));
    }
    state.step += 1;
    let (c1, c2) = bias_corrections(state.step);
    let (m, v) = (&mut state.m[0], &mut state.v[0]);
    let data = protos.as_mut_slice();
    for r in 0..k {
        let row = &mut data[r * d..(r + 1) * d];
        let g = &grads[r * d..(r + 1) * d];
        let gc = if opts.project { dot(g, row) } else { 0.0 };
        for j in 0..d {
            let gt = g[j] - gc * row[j];
            let idx = r * d + j;
            m[idx] = BETA1 * m[idx] + (1.0 - BETA1) * gt;
            v[idx] = BETA2 * v[idx] + (1.0 - BETA2) * gt * gt;
            row[j] -= lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + EPS_OPT);
        }
        if opts.retract {
            let n = dot(row, row).sqrt();
            if !(n > 1e-12 && n.is_finite()) {
                return Err(Error::invalid(format!(
                    "prototype row {r} collapsed to norm {n} during the update"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(())
}

/// Linear warmup from `start_lr` to `peak_lr`, then cosine decay to
/// `final_lr` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub start_lr: f64,
}

impl ScheduleConfig {
    /// 50 warmup epochs to 1e-4 over 500, cosine to 1e-5.
    pub fn paper() -> Self {
        Self {
            warmup_epochs: 50,
            total_epochs: 500,
            peak_lr: 1e-4,
            final_lr: 1e-5,
            start_lr: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let lrs = [self.peak_lr, self.final_lr, self.start_lr];
        if lrs.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::config("learning rates must be finite and > 0"));
        }
        if self.start_lr > self.peak_lr || self.final_lr > self.peak_lr {
            return Err(Error::config("start_lr and final_lr must not exceed peak_lr"));
        }
        Ok(())
    }
}

pub fn lr_at(s: &ScheduleConfig, epoch: usize) -> Result<f64> {
    if epoch >= s.total_epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} is outside the schedule of {} epochs",
            s.total_epochs
        )));
    }
    if epoch < s.warmup_epochs {
        let t = epoch as f64 / s.warmup_epochs as f64;
        return Ok(s.start_lr + (s.peak_lr - s.start_lr) * t);
    }
    let span = s.total_epochs - 1 - s.warmup_epochs;
    if span == 0 {
        return Ok(s.peak_lr);
    }
    let t = (epoch - s.warmup_epochs) as f64 / span as f64;
    Ok(s.final_lr + 0.5 * (s.peak_lr - s.final_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}
