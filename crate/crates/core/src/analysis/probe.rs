//! Nucleus-type probe: encoder → L2-normalized pre-embedding → linear layer,
//! trained with softmax cross-entropy under stratified k-fold
//! cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::analysis::kfold::stratified_kfold;
use crate::analysis::metrics::Metrics;
use crate::autodiff::{Tape, Tensor};
use crate::encoder::{EncoderConfig, EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::synth::{mix_seed, NucleusClass, SlideRecord};
use crate::training::Checkpoint;
use crate::views::nucleus_view;

pub const CLASSES: usize = 4;
/// Per-class sample counts of the default probe dataset (720 views).
pub const DEFAULT_CLASS_COUNTS: [usize; CLASSES] = [307, 297, 49, 67];

const HEAD_NAMES: [&str; 2] = ["probe.weight", "probe.bias"];
const HEAD_INIT_STD: f64 = 0.01;

/// Masked nucleus views with class labels.
#[derive(Debug, Clone)]
pub struct NucleusDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// `(slide id, nucleus id)` per sample.
    pub sources: Vec<(u32, u16)>,
}

impl NucleusDataset {
    /// Draws `counts[c]` nuclei of each class from `slides`, resized to
    /// `input_size`.
    pub fn from_slides(
        slides: &[SlideRecord],
        counts: [usize; CLASSES],
        nucleus_size: u32,
        input_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut pools: Vec<Vec<(usize, usize)>> = vec![Vec::new(); CLASSES];
        for (si, s) in slides.iter().enumerate() {
            for (ni, n) in s.nuclei.iter().enumerate() {
                pools[n.class as usize].push((si, ni));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self {
            images: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
        };
        for (c, pool) in pools.iter_mut().enumerate() {
            if pool.len() < counts[c] {
                return Err(Error::invalid(format!(
                    "corpus has {} {} nuclei, probe needs {}",
                    pool.len(),
                    NucleusClass::ALL[c],
                    counts[c]
                )));
            }
            pool.shuffle(&mut rng);
            for &(si, ni) in &pool[..counts[c]] {
                let (s, n) = (&slides[si], &slides[si].nuclei[ni]);
                out.images.push(nucleus_view(s, n, nucleus_size)?.to_tensor(input_size));
                out.labels.push(c);
                out.sources.push((s.id, n.id));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Train only the linear layer.
    pub freeze: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            seed: 0,
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            freeze: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub pretrained: bool,
    pub freeze: bool,
    pub seed: u64,
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
}

impl ProbeReport {
    pub fn arm(&self) -> &'static str {
        if self.pretrained {
            "pretrained"
        } else {
            "scratch"
        }
    }

    pub const TSV_HEADER: &'static str = "arm\tmode\tseed\tfold\taccuracy\tf1\tprecision\trecall";

    pub fn tsv_rows(&self) -> String {
        let mode = if self.freeze { "frozen" } else { "finetune" };
        let row = |fold: &str, m: &Metrics| {
            format!(
                "{}\t{mode}\t{}\t{fold}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                self.arm(),
                self.seed,
                m.accuracy,
                m.f1,
                m.precision,
                m.recall
            )
        };
        let mut s: String = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, m)| row(&i.to_string(), m))
            .collect();
        s.push_str(&row("mean", &self.mean));
        s
    }
}

struct ProbeModel {
    encoder: EncoderParams,
    /// `[weight [C, d], bias [C]]`.
    head: Vec<Tensor>,
}

/// Encoder and head gradients.
type ProbeGrads = (Vec<Tensor>, Vec<Tensor>);

impl ProbeModel {
    fn logits_and_grads(&self, image: &Tensor, label: Option<usize>) -> Result<(Vec<f64>, Option<ProbeGrads>)> {
        let mut tape = Tape::new();
        let ev = self.encoder.register(&mut tape);
        let w = tape.leaf(self.head[0].clone());
        let b = tape.leaf(self.head[1].clone());
        let x = tape.leaf(image.clone());
        let pre = self.encoder.forward(&mut tape, &ev, x)?;
        let n = tape.l2_normalize(pre)?;
        let logits = tape.linear(n, w, b)?;
        let out = tape.value(logits).data().to_vec();
        let Some(label) = label else { return Ok((out, None)) };
        let loss = tape.softmax_cross_entropy(logits, label)?;
        let g = tape.backward(loss)?;
        let grab = |v| {
            g.get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        };
        let enc = ev.0.iter().map(|v| grab(*v)).collect();
        Ok((out, Some((enc, vec![grab(w), grab(b)]))))
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        let (l, _) = self.logits_and_grads(image, None)?;
        Ok(argmax(&l))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn add_into(acc: &mut [Tensor], src: &[Tensor], scale: f64) {
    for (a, s) in acc.iter_mut().zip(src) {
        a.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += scale * y);
    }
}

fn train_fold(
    init: &EncoderParams,
    data: &NucleusDataset,
    train: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeModel> {
    let d = init.config().dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
    let w = Tensor::new(
        vec![CLASSES, d],
        (0..CLASSES * d).map(|_| normal.sample(&mut rng)).collect(),
    )?;
    let mut model = ProbeModel {
        encoder: init.clone(),
        head: vec![w, Tensor::zeros(&[CLASSES])],
    };
    let mut enc_opt = AdamState::for_tensors(model.encoder.tensors());
    let mut head_opt = AdamState::for_tensors(&model.head);
    let mut order = train.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let per: Vec<(Vec<Tensor>, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let (_, g) = model.logits_and_grads(&data.images[i], Some(data.labels[i]))?;
                    Ok(g.expect("gradients requested"))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut eg: Vec<Tensor> = model
                .encoder
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let mut hg: Vec<Tensor> = model.head.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (e, h) in &per {
                add_into(&mut eg, e, scale);
                add_into(&mut hg, h, scale);
            }
            if !cfg.freeze {
                adam_step(model.encoder.tensors_mut(), &eg, &mut enc_opt, cfg.lr, &PARAM_NAMES)?;
            }
            adam_step(&mut model.head, &hg, &mut head_opt, cfg.lr, &HEAD_NAMES)?;
        }
    }
    Ok(model)
}

/// Runs the k-fold probe. `pretrained` supplies the initial encoder; without
/// it each fold starts from a fresh initialization of `arch`.
pub fn probe_train_eval(
    pretrained: Option<&Checkpoint>,
    arch: EncoderConfig,
    data: &NucleusDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::config("probe epochs, batch size and lr must be positive"));
    }
    let arch = match pretrained {
        Some(ck) => *ck.encoder.config(),
        None => arch,
    };
    let first = data
        .images
        .first()
        .ok_or_else(|| Error::invalid("empty probe dataset"))?;
    if first.shape() != [3, arch.input_size, arch.input_size] {
        return Err(Error::DimensionMismatch {
            what: "probe image side vs encoder input size".into(),
            expected: arch.input_size,
            found: first.shape().get(1).copied().unwrap_or(0),
        });
    }
    let fold_of = stratified_kfold(&data.labels, cfg.folds, mix_seed(cfg.seed, 0))?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..data.len()).filter(|i| fold_of[*i] != f).collect();
        let val: Vec<usize> = (0..data.len()).filter(|i| fold_of[*i] == f).collect();
        let init = match pretrained {
            Some(ck) => ck.encoder.clone(),
            None => EncoderParams::init(arch, mix_seed(cfg.seed, 100 + f as u64))?,
        };
        let model = train_fold(&init, data, &train, cfg, mix_seed(cfg.seed, 200 + f as u64))?;
        let pred = val
            .par_iter()
            .map(|&i| model.predict(&data.images[i]))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<usize> = val.iter().map(|i| data.labels[*i]).collect();
        folds.push(Metrics::compute(CLASSES, &truth, &pred)?);
    }
    Ok(ProbeReport {
        pretrained: pretrained.is_some(),
        freeze: cfg.freeze,
        seed: cfg.seed,
        mean: Metrics::mean(&folds),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SubtypeProfile};

    fn arch() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            channels: [3, 4, 4],
            hidden: 6,
            dim: 4,
        }
    }

    #[test]
    fn dataset_has_requested_counts() {
        let slides = generate_corpus(&SubtypeProfile::default_set(), 6, 1, 256).unwrap();
        let ds = NucleusDataset::from_slides(&slides, [10, 10, 5, 5], 16, 8, 0).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.labels.iter().filter(|l| **l == 2).count(), 5);
        assert!(NucleusDataset::from_slides(&slides, [100_000, 1, 1, 1], 16, 8, 0).is_err());
    }

    #[test]
    fn probe_runs_and_reports_bounded_metrics() {
        let slides = generate_corpus(&SubtypeProfile::default_set(), 6, 1, 256).unwrap();
        let ds = NucleusDataset::from_slides(&slides, [12, 12, 8, 8], 16, 8, 0).unwrap();
        let cfg = ProbeConfig {
            epochs: 2,
            ..ProbeConfig::default()
        };
        let r = probe_train_eval(None, arch(), &ds, &cfg).unwrap();
        assert_eq!(r.folds.len(), 4);
        for m in r.folds.iter().chain([&r.mean]) {
            for v in [m.accuracy, m.f1, m.precision, m.recall] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert_eq!(r, probe_train_eval(None, arch(), &ds, &cfg).unwrap());
        assert_eq!(r.tsv_rows().lines().count(), 5);
        let frozen = probe_train_eval(None, arch(), &ds, &ProbeConfig { freeze: true, ..cfg }).unwrap();
        assert!(frozen.freeze);
    }
}
