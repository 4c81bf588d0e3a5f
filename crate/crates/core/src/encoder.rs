//! Shared convolutional encoder: three conv blocks (3×3 conv, rectifier,
//! 2× average-pool downsampling), global average pooling, and a two-layer
//! projection head producing a `d`-dimensional pre-embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, TangentVector};

pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "head1.weight",
    "head1.bias",
    "head2.weight",
    "head2.bias",
];

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Side length of the square input; every view is resized to it.
    pub input_size: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    /// Poincaré ball dimension `d`.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: [8, 16, 16],
            hidden: 32,
            dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "encoder input size must be a multiple of 8 and ≥ 8, got {}",
                self.input_size
            )));
        }
        if self.channels.contains(&0) || self.hidden == 0 || self.dim < 2 {
            return Err(Error::config("encoder widths must be positive and dim ≥ 2"));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> [Vec<usize>; 10] {
        let [c1, c2, c3] = self.channels;
        [
            vec![c1, IN_CHANNELS, 3, 3],
            vec![c1],
            vec![c2, c1, 3, 3],
            vec![c2],
            vec![c3, c2, 3, 3],
            vec![c3],
            vec![self.hidden, c3],
            vec![self.hidden],
            vec![self.dim, self.hidden],
            vec![self.dim],
        ]
    }
}

/// Encoder weights in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

/// Tangent vector at the origin produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreEmbedding(pub Vec<f64>);

impl PreEmbedding {
    pub fn to_ball(&self, k: Curvature) -> crate::geometry::BallPoint {
        let v = TangentVector::new(self.0.clone()).expect("encoder output is finite");
        crate::geometry::exp_map0(&v, k)
    }
}

/// Leaf handles of the parameters on one tape.
#[derive(Debug, Clone)]
pub struct EncoderVars(pub Vec<Var>);

/// Initial scale of the last layer relative to He init. Much smaller and the
/// desk run stays at the uniform assignment; much larger and embeddings pin
/// at the ball boundary.
const HEAD_OUT_GAIN: f64 = 1.0;

impl EncoderParams {
    /// He-normal initialization for the hidden layers, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let gain = if i == 8 { HEAD_OUT_GAIN } else { 2f64.sqrt() };
                let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::DimensionMismatch {
                what: "encoder parameter count".into(),
                expected: PARAM_NAMES.len(),
                found: tensors.len(),
            });
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(config.param_shapes()).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Records the forward pass on `tape`; returns the pre-embedding node.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        let s = self.config.input_size;
        if shape != [IN_CHANNELS, s, s] {
            return Err(Error::invalid(format!(
                "encoder expects a [{IN_CHANNELS}, {s}, {s}] image, got {shape:?}"
            )));
        }
        let p = &vars.0;
        let mut h = image;
        for block in 0..3 {
            h = tape.conv3x3(h, p[2 * block], p[2 * block + 1])?;
            h = tape.relu(h)?;
            h = tape.avg_pool2(h)?;
        }
        h = tape.global_avg_pool(h)?;
        h = tape.linear(h, p[6], p[7])?;
        h = tape.relu(h)?;
        tape.linear(h, p[8], p[9])
    }

    /// Forward pass without keeping the tape.
    pub fn encode(&self, image: &Tensor) -> Result<PreEmbedding> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.leaf(image.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(PreEmbedding(tape.value(out).data().to_vec()))
    }
}
