//! Self-supervised training: view sampling → encoder → exponential map →
//! prototype assignment → objective → Adam / sphere-Adam updates.
//!
//! Every sample's views are drawn from a stream keyed by `(seed, epoch,
//! slide)`, per-sample work runs on the rayon pool, and gradients are summed
//! in batch order, so the loss trace depends only on the configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{parse_bool, parse_list, parse_value, KeyValues};
use crate::container::{Container, Section, CHECKPOINT_MAGIC};
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::geometry::dot;
use crate::gradcheck::assign_on_tape;
use crate::loss::{hmsn_loss_terms, BatchAssignments, LossTerms, LossWeights};
use crate::optim::{adam_step, lr_at, sphere_adam_step, AdamState, ScheduleConfig};
use crate::prototypes::{AssignmentVector, PrototypeSet, Temperature};
use crate::synth::{mix_seed, SlideRecord};
use crate::views::{extract, sample_views, ViewBatchSpec};

const ENCODER_STREAM: u64 = 1;
const PROTOTYPE_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 3;
const VIEW_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Ball dimension `d`.
    pub dim: usize,
    /// Prototype count `K`.
    pub prototypes: usize,
    pub tau_target: f64,
    pub tau_anchor: f64,
    pub lambda: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Anchors per target `M`.
    pub anchors: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub start_lr: f64,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Results are identical either way; `true` disables the worker pool.
    pub deterministic: bool,
    pub input_size: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    pub scales: Vec<u32>,
    pub nucleus_size: u32,
    pub nucleus_fraction: f64,
    /// Save every this many epochs when a checkpoint path is given; `0`
    /// saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let views = ViewBatchSpec::default();
        Self {
            dim: 16,
            prototypes: 32,
            tau_target: Temperature::TARGET.value(),
            tau_anchor: Temperature::ANCHOR.value(),
            lambda: 10.0,
            beta: 0.25,
            kappa: 1.0,
            anchors: views.anchors,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 3,
            peak_lr: 1e-2,
            final_lr: 3e-4,
            start_lr: 1e-6,
            seed: 0,
            corpus: None,
            deterministic: false,
            input_size: enc.input_size,
            channels: enc.channels,
            hidden: enc.hidden,
            scales: views.scales,
            nucleus_size: views.nucleus_size,
            nucleus_fraction: views.nucleus_fraction,
            checkpoint_every: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "dim",
    "prototypes",
    "tau_target",
    "tau_anchor",
    "lambda",
    "beta",
    "kappa",
    "anchors",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "peak_lr",
    "final_lr",
    "start_lr",
    "seed",
    "corpus",
    "deterministic",
    "input_size",
    "channels",
    "hidden",
    "scales",
    "nucleus_size",
    "nucleus_fraction",
    "checkpoint_every",
    "profile",
];

impl TrainConfig {
    /// Full-size settings: `d = 64`, `K = 512`, `B = 1024`, 500 epochs.
    pub fn paper() -> Self {
        let s = ScheduleConfig::paper();
        Self {
            dim: 64,
            prototypes: 512,
            batch_size: 1024,
            epochs: s.total_epochs,
            warmup_epochs: s.warmup_epochs,
            peak_lr: s.peak_lr,
            final_lr: s.final_lr,
            start_lr: s.start_lr,
            ..Self::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = crate::config::normalize_key(key);
        let k = key.as_str();
        match k {
            "dim" => self.dim = parse_value(k, value)?,
            "prototypes" => self.prototypes = parse_value(k, value)?,
            "tau_target" => self.tau_target = parse_value(k, value)?,
            "tau_anchor" => self.tau_anchor = parse_value(k, value)?,
            "lambda" => self.lambda = parse_value(k, value)?,
            "beta" => self.beta = parse_value(k, value)?,
            "kappa" => self.kappa = parse_value(k, value)?,
            "anchors" => self.anchors = parse_value(k, value)?,
            "batch_size" => self.batch_size = parse_value(k, value)?,
            "epochs" => self.epochs = parse_value(k, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(k, value)?,
            "peak_lr" => self.peak_lr = parse_value(k, value)?,
            "final_lr" => self.final_lr = parse_value(k, value)?,
            "start_lr" => self.start_lr = parse_value(k, value)?,
            "seed" => self.seed = parse_value(k, value)?,
            "corpus" => self.corpus = (!value.is_empty()).then(|| PathBuf::from(value)),
            "deterministic" => self.deterministic = parse_bool(k, value)?,
            "input_size" => self.input_size = parse_value(k, value)?,
            "channels" => {
                let c: Vec<usize> = parse_list(k, value)?;
                self.channels = c
                    .try_into()
                    .map_err(|_| Error::config("`channels` needs exactly three values"))?;
            }
            "hidden" => self.hidden = parse_value(k, value)?,
            "scales" => self.scales = parse_list(k, value)?,
            "nucleus_size" => self.nucleus_size = parse_value(k, value)?,
            "nucleus_fraction" => self.nucleus_fraction = parse_value(k, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(k, value)?,
            // selects a preset; only meaningful as the first key
            "profile" => match value {
                "desk" => *self = Self::default(),
                "paper" => *self = Self::paper(),
                _ => return Err(Error::config(format!("unknown profile `{value}` (desk, paper)"))),
            },
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in &kv.0 {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&KeyValues::load(path)?)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in `key = value` form; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let scales = self.scales.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let corpus = self
            .corpus
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = write!(
            s,
            "dim = {}\nprototypes = {}\ntau_target = {}\ntau_anchor = {}\nlambda = {}\nbeta = {}\nkappa = {}\n\
             anchors = {}\nbatch_size = {}\nepochs = {}\nwarmup_epochs = {}\npeak_lr = {}\nfinal_lr = {}\n\
             start_lr = {}\nseed = {}\ncorpus = {corpus}\ndeterministic = {}\ninput_size = {}\nchannels = {}\n\
             hidden = {}\nscales = {scales}\nnucleus_size = {}\nnucleus_fraction = {}\ncheckpoint_every = {}\n",
            self.dim,
            self.prototypes,
            self.tau_target,
            self.tau_anchor,
            self.lambda,
            self.beta,
            self.kappa,
            self.anchors,
            self.batch_size,
            self.epochs,
            self.warmup_epochs,
            self.peak_lr,
            self.final_lr,
            self.start_lr,
            self.seed,
            self.deterministic,
            self.input_size,
            join(&self.channels),
            self.hidden,
            self.nucleus_size,
            self.nucleus_fraction,
            self.checkpoint_every,
        );
        s
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            channels: self.channels,
            hidden: self.hidden,
            dim: self.dim,
        }
    }

    pub fn view_spec(&self) -> ViewBatchSpec {
        ViewBatchSpec {
            scales: self.scales.clone(),
            anchors: self.anchors,
            nucleus_size: self.nucleus_size,
            nucleus_fraction: self.nucleus_fraction,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            peak_lr: self.peak_lr,
            final_lr: self.final_lr,
            start_lr: self.start_lr,
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("prototypes", self.prototypes),
            ("anchors", self.anchors),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be positive")));
            }
        }
        let reals = [
            ("tau_target", self.tau_target),
            ("tau_anchor", self.tau_anchor),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("kappa", self.kappa),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("`{name}` must be finite and positive, got {v}")));
            }
        }
        if self.tau_target >= self.tau_anchor {
            return Err(Error::config(format!(
                "tau_target ({}) must be below tau_anchor ({})",
                self.tau_target, self.tau_anchor
            )));
        }
        if self.kappa != 1.0 {
            return Err(Error::config(
                "Busemann assignment is defined on the unit ball; kappa must be 1",
            ));
        }
        self.encoder_config().validate()?;
        self.view_spec().validate()?;
        self.schedule().validate()?;
        Ok(())
    }
}

/// One row of the training log. Entropy columns hold raw entropies, so
/// `loss = ce − λ·mean_entropy + β·anchor_entropy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    /// `H(p̄)` of the mean anchor assignment.
    pub mean_entropy: f64,
    /// Mean anchor-assignment entropy.
    pub anchor_entropy: f64,
    /// Largest `|‖c‖ − 1|` over prototype rows after the epoch.
    pub prototype_norm_deviation: f64,
    /// Largest embedding norm seen during the epoch.
    pub max_ball_norm: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\tloss\tce_term\tmean_entropy_term\tanchor_entropy_term";
const HISTORY_COLS: usize = 8;

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.loss, self.cross_entropy, self.mean_entropy, self.anchor_entropy
        )
    }

    fn to_row(self) -> [f64; HISTORY_COLS] {
        [
            self.epoch as f64,
            self.lr,
            self.loss,
            self.cross_entropy,
            self.mean_entropy,
            self.anchor_entropy,
            self.prototype_norm_deviation,
            self.max_ball_norm,
        ]
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            lr: r[1],
            loss: r[2],
            cross_entropy: r[3],
            mean_entropy: r[4],
            anchor_entropy: r[5],
            prototype_norm_deviation: r[6],
            max_ball_norm: r[7],
        }
    }
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub prototypes: PrototypeSet,
    pub encoder_opt: AdamState,
    pub prototype_opt: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

fn split_u64(x: u64) -> Vec<u32> {
    vec![x as u32, (x >> 32) as u32]
}

fn join_u64(v: &[u32]) -> Result<u64> {
    match v {
        [lo, hi] => Ok(*lo as u64 | (*hi as u64) << 32),
        _ => Err(Error::invalid("expected a two-word counter")),
    }
}

fn dims(shape: &[usize]) -> Vec<u32> {
    shape.iter().map(|d| *d as u32).collect()
}

impl Checkpoint {
    /// Fresh parameters and optimizer state for `config`.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(config.encoder_config(), mix_seed(config.seed, ENCODER_STREAM))?;
        let prototypes = PrototypeSet::init(config.prototypes, config.dim, mix_seed(config.seed, PROTOTYPE_STREAM))?;
        Ok(Self {
            encoder_opt: AdamState::for_tensors(encoder.tensors()),
            prototype_opt: AdamState::new([prototypes.as_slice().len()]),
            config,
            encoder,
            prototypes,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_MAGIC);
        let text: Vec<u32> = self.config.render().bytes().map(u32::from).collect();
        c.push(Section::u32("config", vec![text.len() as u32], text)?)?;
        for (name, t) in self.encoder.named() {
            c.push(Section::f64(
                format!("encoder.{name}"),
                dims(t.shape()),
                t.data().to_vec(),
            )?)?;
        }
        let (k, d) = (self.prototypes.k(), self.prototypes.dim());
        c.push(Section::f64(
            "prototypes",
            vec![k as u32, d as u32],
            self.prototypes.as_slice().to_vec(),
        )?)?;
        for (tag, st) in [("encoder", &self.encoder_opt), ("prototypes", &self.prototype_opt)] {
            let m: Vec<f64> = st.m.concat();
            let v: Vec<f64> = st.v.concat();
            c.push(Section::f64(format!("opt.{tag}.m"), vec![m.len() as u32], m)?)?;
            c.push(Section::f64(format!("opt.{tag}.v"), vec![v.len() as u32], v)?)?;
            c.push(Section::u32(format!("opt.{tag}.step"), vec![2], split_u64(st.step))?)?;
        }
        c.push(Section::u32("epoch", vec![1], vec![self.epoch as u32])?)?;
        let hist: Vec<f64> = self.history.iter().flat_map(|h| h.to_row()).collect();
        c.push(Section::f64(
            "history",
            vec![self.history.len() as u32, HISTORY_COLS as u32],
            hist,
        )?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (_, text) = c.u32s("config")?;
        let text: String = text
            .iter()
            .map(|b| u8::try_from(*b).map(char::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("config section holds a non-byte value"))?;
        let mut config = TrainConfig::default();
        config.apply(&KeyValues::parse(&text)?)?;
        config.validate()?;
        let enc_cfg = config.encoder_config();
        let tensors = enc_cfg
            .param_shapes()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(shape, name)| {
                let (d, data) = c.f64s(&format!("encoder.{name}"))?;
                if d != dims(shape).as_slice() {
                    return Err(Error::invalid(format!(
                        "encoder.{name} has dims {d:?}, config implies {shape:?}"
                    )));
                }
                Tensor::new(shape.clone(), data.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams::from_tensors(enc_cfg, tensors)?;
        let (pd, pdata) = c.f64s("prototypes")?;
        if pd.len() != 2 {
            return Err(Error::invalid("prototypes must be a matrix"));
        }
        let prototypes = PrototypeSet::from_rows(pd[0] as usize, pd[1] as usize, pdata.to_vec())?;
        if prototypes.k() != config.prototypes || prototypes.dim() != config.dim {
            return Err(Error::DimensionMismatch {
                what: "prototype matrix vs stored config".into(),
                expected: config.prototypes * config.dim,
                found: prototypes.k() * prototypes.dim(),
            });
        }
        let load_opt = |tag: &str, sizes: &[usize]| -> Result<AdamState> {
            let mut st = AdamState::new(sizes.iter().copied());
            let (_, m) = c.f64s(&format!("opt.{tag}.m"))?;
            let (_, v) = c.f64s(&format!("opt.{tag}.v"))?;
            let total: usize = sizes.iter().sum();
            if m.len() != total || v.len() != total {
                return Err(Error::DimensionMismatch {
                    what: format!("opt.{tag} moments"),
                    expected: total,
                    found: m.len(),
                });
            }
            let mut off = 0;
            for (i, n) in sizes.iter().enumerate() {
                st.m[i].copy_from_slice(&m[off..off + n]);
                st.v[i].copy_from_slice(&v[off..off + n]);
                off += n;
            }
            st.step = join_u64(c.u32s(&format!("opt.{tag}.step"))?.1)?;
            Ok(st)
        };
        let enc_sizes: Vec<usize> = encoder.tensors().iter().map(Tensor::len).collect();
        let encoder_opt = load_opt("encoder", &enc_sizes)?;
        let prototype_opt = load_opt("prototypes", &[prototypes.as_slice().len()])?;
        let epoch = match c.u32s("epoch")?.1 {
            [e] => *e as usize,
            _ => return Err(Error::invalid("epoch section must hold one value")),
        };
        let (hd, h) = c.f64s("history")?;
        if hd.len() != 2 || hd[1] as usize != HISTORY_COLS {
            return Err(Error::invalid(format!("history has dims {hd:?}")));
        }
        let history = h.chunks_exact(HISTORY_COLS).map(EpochLog::from_row).collect();
        Ok(Self {
            config,
            encoder,
            prototypes,
            encoder_opt,
            prototype_opt,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_MAGIC)?)
    }

    /// Loads `path` and checks that its architecture matches `config`.
    pub fn load_for(path: &Path, config: &TrainConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_compatible(config)?;
        Ok(ck)
    }

    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let pairs = [
            ("embedding dimension d", config.dim, self.config.dim),
            ("prototype count K", config.prototypes, self.config.prototypes),
            ("encoder input size", config.input_size, self.config.input_size),
            ("encoder hidden width", config.hidden, self.config.hidden),
        ];
        for (what, expected, found) in pairs {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected,
                    found,
                });
            }
        }
        for i in 0..3 {
            if config.channels[i] != self.config.channels[i] {
                return Err(Error::DimensionMismatch {
                    what: format!("encoder channels[{i}]"),
                    expected: config.channels[i],
                    found: self.config.channels[i],
                });
            }
        }
        Ok(())
    }

    pub fn temperatures(&self) -> Result<(Temperature, Temperature)> {
        Ok((
            Temperature::new(self.config.tau_target)?,
            Temperature::new(self.config.tau_anchor)?,
        ))
    }
}

/// Side outputs of [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Periodic and final checkpoint destination.
    pub checkpoint_path: Option<PathBuf>,
    /// Where to dump state when the loss turns non-finite.
    pub dump_path: Option<PathBuf>,
    /// Stop once this many epochs are complete, keeping the schedule of
    /// `config.epochs`.
    pub stop_at_epoch: Option<usize>,
}

struct AnchorTape {
    tape: Tape,
    vars: EncoderVars,
    z: Var,
}

struct SampleForward {
    target: Vec<f64>,
    anchors: Vec<AnchorTape>,
    max_norm: f64,
}

#[derive(Debug, Clone, Copy)]
struct BatchStats {
    terms: LossTerms,
    max_norm: f64,
}

fn maybe_par<T, R, F>(items: &[T], sequential: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if sequential {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn forward_sample(ck: &Checkpoint, slide: &SlideRecord, seed: u64, tau_t: Temperature) -> Result<SampleForward> {
    let cfg = &ck.config;
    let spec = cfg.view_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = sample_views(slide, &spec, &mut rng)?;
    let input = cfg.input_size;
    let protos = Tensor::new(
        vec![ck.prototypes.k(), ck.prototypes.dim()],
        ck.prototypes.as_slice().to_vec(),
    )?;

    let target = {
        let mut tape = Tape::new();
        let vars = ck.encoder.register(&mut tape);
        let img = tape.leaf(extract(slide, &views.target, spec.nucleus_size)?.to_tensor(input));
        let pre = ck.encoder.forward(&mut tape, &vars, img)?;
        let pv = tape.leaf(protos);
        let p = assign_on_tape(&mut tape, pre, pv, cfg.kappa, tau_t)?;
        tape.value(p).data().to_vec()
    };
    let mut max_norm: f64 = 0.0;
    let anchors = views
        .anchors
        .iter()
        .map(|v| {
            let mut tape = Tape::new();
            let vars = ck.encoder.register(&mut tape);
            let img = tape.leaf(extract(slide, v, spec.nucleus_size)?.to_tensor(input));
            let pre = ck.encoder.forward(&mut tape, &vars, img)?;
            let z = tape.exp_map0(pre, cfg.kappa)?;
            let zv = tape.value(z).data();
            max_norm = max_norm.max(dot(zv, zv).sqrt());
            Ok(AnchorTape { tape, vars, z })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleForward {
        target,
        anchors,
        max_norm,
    })
}

/// One optimizer step on the slides `batch`. Returns the batch loss terms.
fn train_step(
    ck: &mut Checkpoint,
    slides: &[SlideRecord],
    batch: &[usize],
    epoch: usize,
    lr: f64,
    opts: &TrainOptions,
) -> Result<BatchStats> {
    let cfg = ck.config.clone();
    let (tau_t, tau_a) = ck.temperatures()?;
    let weights = cfg.weights()?;
    let n = slides.len() as u64;
    let view_base = mix_seed(cfg.seed, VIEW_STREAM);

    let forwards: Vec<SampleForward> = {
        let ck_ref: &Checkpoint = ck;
        maybe_par(batch, cfg.deterministic, |&i| {
            forward_sample(
                ck_ref,
                &slides[i],
                mix_seed(view_base, epoch as u64 * n + i as u64),
                tau_t,
            )
        })
        .into_iter()
        .collect::<Result<_>>()?
    };

    // batch head: z → Busemann → softmax → objective
    let mut head = Tape::new();
    let pv = head.leaf(Tensor::new(
        vec![ck.prototypes.k(), ck.prototypes.dim()],
        ck.prototypes.as_slice().to_vec(),
    )?);
    let mut targets = Vec::with_capacity(batch.len());
    let mut anchors = Vec::with_capacity(batch.len());
    let mut z_leaves = Vec::with_capacity(batch.len());
    for f in &forwards {
        targets.push(head.leaf(Tensor::vector(f.target.clone())));
        let mut group = Vec::with_capacity(f.anchors.len());
        let mut leaves = Vec::with_capacity(f.anchors.len());
        for a in &f.anchors {
            let zl = head.leaf(a.tape.value(a.z).clone());
            let b = head.busemann(zl, pv)?;
            let s = head.scale(b, -1.0 / tau_a.value())?;
            group.push(head.softmax(s)?);
            leaves.push(zl);
        }
        anchors.push(group);
        z_leaves.push(leaves);
    }
    let loss = head.hmsn_loss(&targets, &anchors, weights)?;
    let value = head.value(loss).item();
    let batch_ids: Vec<u32> = batch.iter().map(|i| slides[*i].id).collect();
    if !value.is_finite() {
        let dump = match &opts.dump_path {
            Some(p) => {
                ck.save(p)?;
                Some(p.clone())
            }
            None => None,
        };
        return Err(Error::NonFiniteLoss { epoch, batch_ids, dump });
    }
    let av = |v: &Var| AssignmentVector::new_unchecked(head.value(*v).data().to_vec());
    let terms = hmsn_loss_terms(
        &BatchAssignments::new(
            targets.iter().map(av).collect(),
            anchors.iter().map(|g| g.iter().map(av).collect()).collect(),
        )?,
        weights,
    );
    let grads = head.backward(loss)?;
    let proto_grad = grads
        .get(pv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; ck.prototypes.as_slice().len()]);

    // encoder gradients: push ∂L/∂z back through each anchor tape
    let jobs: Vec<(&SampleForward, &Vec<Var>)> = forwards.iter().zip(&z_leaves).collect();
    let per_sample: Vec<Vec<Tensor>> = maybe_par(&jobs, cfg.deterministic, |(f, leaves)| {
        let mut acc: Vec<Tensor> = ck.encoder.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (a, zl) in f.anchors.iter().zip(leaves.iter()) {
            let Some(gz) = grads.get(*zl) else { continue };
            let g = a.tape.backward_with(a.z, gz.clone())?;
            for (dst, v) in acc.iter_mut().zip(&a.vars.0) {
                if let Some(t) = g.get(*v) {
                    dst.data_mut().iter_mut().zip(t.data()).for_each(|(d, s)| *d += s);
                }
            }
        }
        Ok(acc)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut enc_grads: Vec<Tensor> = ck.encoder.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in &per_sample {
        for (dst, src) in enc_grads.iter_mut().zip(s) {
            dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, x)| *d += x);
        }
    }

    let max_norm = forwards.iter().map(|f| f.max_norm).fold(0.0, f64::max);
    adam_step(
        ck.encoder.tensors_mut(),
        &enc_grads,
        &mut ck.encoder_opt,
        lr,
        &PARAM_NAMES,
    )?;
    sphere_adam_step(&mut ck.prototypes, &proto_grad, &mut ck.prototype_opt, lr)?;
    Ok(BatchStats { terms, max_norm })
}

/// Trains from fresh parameters for `config.epochs` epochs, calling `log`
/// after every epoch.
pub fn train(
    config: TrainConfig,
    slides: &[SlideRecord],
    opts: &TrainOptions,
    log: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let ck = Checkpoint::init(config)?;
    resume(ck, slides, opts, log)
}

/// Continues training `ck` up to `ck.config.epochs`.
pub fn resume(
    mut ck: Checkpoint,
    slides: &[SlideRecord],
    opts: &TrainOptions,
    mut log: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    ck.config.validate()?;
    if slides.is_empty() {
        return Err(Error::invalid("training needs at least one slide"));
    }
    let schedule = ck.config.schedule();
    let order_base = mix_seed(ck.config.seed, ORDER_STREAM);
    let stop = opts.stop_at_epoch.unwrap_or(usize::MAX).min(ck.config.epochs);
    while ck.epoch < stop {
        let epoch = ck.epoch;
        let lr = lr_at(&schedule, epoch)?;
        let mut order: Vec<usize> = (0..slides.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(order_base, epoch as u64)));
        let mut sums = [0.0f64; 4];
        let mut max_norm: f64 = 0.0;
        for batch in order.chunks(ck.config.batch_size) {
            let st = train_step(&mut ck, slides, batch, epoch, lr, opts)?;
            let w = batch.len() as f64;
            sums[0] += w * st.terms.total;
            sums[1] += w * st.terms.cross_entropy;
            sums[2] += w * st.terms.mean_entropy;
            sums[3] += w * st.terms.anchor_entropy;
            max_norm = max_norm.max(st.max_norm);
        }
        let n = slides.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss: sums[0] / n,
            cross_entropy: sums[1] / n,
            mean_entropy: sums[2] / n,
            anchor_entropy: sums[3] / n,
            prototype_norm_deviation: ck.prototypes.max_norm_deviation(),
            max_ball_norm: max_norm,
        };
        ck.history.push(entry);
        ck.epoch += 1;
        log(&entry);
        if let Some(p) = &opts.checkpoint_path {
            let every = ck.config.checkpoint_every;
            if every > 0 && ck.epoch.is_multiple_of(every) && ck.epoch < ck.config.epochs {
                ck.save(p)?;
            }
        }
    }
    if let Some(p) = &opts.checkpoint_path {
        ck.save(p)?;
    }
    Ok(ck)
}
