//! Finite-difference checks for the analytic gradients.
//!
//! Relative error is measured norm-wise: `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`. This
//! keeps coordinates whose true gradient is near zero from dominating the
//! comparison with finite-difference round-off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::loss::LossWeights;
use crate::prototypes::{PrototypeSet, Temperature};

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        err = err.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    max_relative_error(analytic, &central_differences(f, params, h))
}

/// Directional variant for large parameter vectors: compares `⟨∇f, u⟩`
/// against `(f(x + hu) − f(x − hu))/2h` over `probes` random unit
/// directions.
pub fn grad_check_directional<F>(f: F, params: &[f64], analytic: &[f64], h: f64, probes: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::with_capacity(probes);
    let mut n = Vec::with_capacity(probes);
    for _ in 0..probes {
        let u: Vec<f64> = (0..params.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let up: Vec<f64> = params.iter().zip(&u).map(|(p, d)| p + h * d / un).collect();
        let dn: Vec<f64> = params.iter().zip(&u).map(|(p, d)| p - h * d / un).collect();
        n.push((f(&up) - f(&dn)) / (2.0 * h));
        a.push(analytic.iter().zip(&u).map(|(g, d)| g * d / un).sum());
    }
    max_relative_error(&a, &n)
}

/// Tiny end-to-end problem: image → encoder → exp map → Busemann →
/// softmax → objective, with trainable encoder weights and prototypes.
pub struct PipelineProblem {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub protos: PrototypeSet,
    /// `[B][1 + M]` images; index 0 of each group is the target view.
    pub images: Vec<Vec<Tensor>>,
    pub weights: LossWeights,
    pub kappa: f64,
}

impl PipelineProblem {
    /// `d = 4`, `K = 4`, `8×8` inputs, `B = 2`, `M = 2`.
    pub fn tiny(seed: u64) -> Result<Self> {
        let config = EncoderConfig {
            input_size: 8,
            channels: [3, 4, 4],
            hidden: 5,
            dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut params = EncoderParams::init(config, seed)?;
        // larger outputs than the training init so the prototype terms are
        // not all near their uniform stationary point
        for t in params.tensors_mut() {
            for x in t.data_mut() {
                *x += 0.2 * (rng.random::<f64>() - 0.5);
            }
        }
        let protos = PrototypeSet::init(4, 4, seed.wrapping_add(1))?;
        let images = (0..2)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.random::<f64>()).collect()).expect("shape")
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            params,
            protos,
            images,
            weights: LossWeights::default(),
            kappa: 1.0,
        })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self
            .params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        x.extend_from_slice(self.protos.as_slice());
        x
    }

    fn unflatten(&self, x: &[f64]) -> (EncoderParams, Tensor) {
        let mut off = 0;
        let tensors = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).expect("shape");
                off += n;
                out
            })
            .collect();
        let params = EncoderParams::from_tensors(self.config, tensors).expect("shapes");
        let protos = Tensor::new(vec![self.protos.k(), self.protos.dim()], x[off..].to_vec()).expect("shape");
        (params, protos)
    }

    /// Target assignments at the current parameters, held fixed for the
    /// finite-difference evaluation.
    pub fn frozen_targets(&self) -> Vec<Vec<f64>> {
        let x = self.flat_params();
        let (params, protos) = self.unflatten(&x);
        self.images
            .iter()
            .map(|g| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape);
                let pv = tape.leaf(protos.clone());
                let img = tape.leaf(g[0].clone());
                let pre = params.forward(&mut tape, &vars, img).expect("forward");
                let p = assign_on_tape(&mut tape, pre, pv, self.kappa, Temperature::TARGET).expect("assign");
                tape.value(p).data().to_vec()
            })
            .collect()
    }

    /// Loss and (if `with_grad`) the gradient with respect to
    /// [`flat_params`](Self::flat_params), with targets from `frozen`.
    pub fn evaluate(&self, x: &[f64], frozen: &[Vec<f64>], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (params, protos) = self.unflatten(x);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let pv = tape.leaf(protos);
        let mut targets = Vec::new();
        let mut anchors = Vec::new();
        for (g, t) in self.images.iter().zip(frozen) {
            targets.push(tape.leaf(Tensor::vector(t.clone())));
            let mut group = Vec::new();
            for img in &g[1..] {
                let iv = tape.leaf(img.clone());
                let pre = params.forward(&mut tape, &vars, iv)?;
                group.push(assign_on_tape(&mut tape, pre, pv, self.kappa, Temperature::ANCHOR)?);
            }
            anchors.push(group);
        }
        let loss = tape.hmsn_loss(&targets, &anchors, self.weights)?;
        let value = tape.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(x.len());
        for v in vars.0.iter().chain(std::iter::once(&pv)) {
            match grads.get(*v) {
                Some(t) => g.extend_from_slice(t.data()),
                None => g.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
            }
        }
        Ok((value, g))
    }

    /// Per-coordinate finite-difference check; returns the relative error.
    pub fn check(&self, h: f64) -> Result<f64> {
        let x = self.flat_params();
        let frozen = self.frozen_targets();
        let (_, analytic) = self.evaluate(&x, &frozen, true)?;
        let f = |p: &[f64]| self.evaluate(p, &frozen, false).expect("forward").0;
        Ok(grad_check(f, &x, &analytic, h))
    }
}

/// Records `softmax(−b(exp₀(pre))/τ)` on the tape.
pub(crate) fn assign_on_tape(
    tape: &mut Tape,
    pre: crate::autodiff::Var,
    protos: crate::autodiff::Var,
    kappa: f64,
    tau: Temperature,
) -> Result<crate::autodiff::Var> {
    let z = tape.exp_map0(pre, kappa)?;
    let b = tape.busemann(z, protos)?;
    let s = tape.scale(b, -1.0 / tau.value())?;
    tape.softmax(s)
}

/// Runs the tiny pipeline check for each seed; returns the per-seed errors.
pub fn pipeline_grad_check(seeds: std::ops::Range<u64>, h: f64) -> Result<Vec<f64>> {
    seeds.map(|s| PipelineProblem::tiny(s)?.check(h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = vec![0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|p| p.iter().map(|v| v * v).sum(), &x, &analytic, 1e-5);
        assert!(err < 1e-9, "{err}");
        let err = grad_check_directional(|p| p.iter().map(|v| v * v).sum(), &x, &analytic, 1e-5, 8, 0);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = vec![1.0, 2.0];
        let err = grad_check(|p| p[0] * p[1], &x, &[2.0, 2.0], 1e-6);
        assert!(err > 0.1);
    }

    #[test]
    fn tiny_pipeline_matches() {
        let errs = pipeline_grad_check(0..3, 1e-6).unwrap();
        for e in errs {
            assert!(e < 1e-4, "{e}");
        }
    }
}
