//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use msrl_core::analysis::probe::DEFAULT_CLASS_COUNTS;
use msrl_core::analysis::{
    assignment_heatmap, embed_dataset, nucleus_share_by_quintile, probe_train_eval, Embeddings, Metrics,
    NucleusDataset, ProbeConfig, ViewTag,
};
use msrl_core::container::{Container, ContainerError, CHECKPOINT_MAGIC, EMBEDDINGS_MAGIC};
use msrl_core::geometry::{
    busemann, distance_from_origin, exp_map0, geodesic_distance, mobius_add, BallPoint, Curvature, IdealPoint,
    TangentVector,
};
use msrl_core::gradcheck::pipeline_grad_check;
use msrl_core::loss::{hmsn_loss, BatchAssignments, LossWeights};
use msrl_core::prototypes::{AssignmentVector, Temperature};
use msrl_core::synth::{generate_corpus, NucleusClass, SlideRecord, Subtype, SubtypeProfile};
use msrl_core::training::{train, Checkpoint, TrainConfig, TrainOptions};
use msrl_core::{corpus, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DESK_SLIDES: u32 = 200;
const DESK_CORPUS_SEED: u64 = 7;
const SLIDE_SIZE: u32 = 256;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// State shared by the criteria that analyse the desk run.
#[derive(Default)]
struct Desk {
    slides: Vec<SlideRecord>,
    checkpoint: Option<Checkpoint>,
    embeddings: Option<Embeddings>,
}

type Criterion = Box<dyn FnMut(&mut Desk) -> Outcome>;

fn main() {
    let mut desk = Desk::default();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("geometry identities", Box::new(|_: &mut Desk| geometry_identities())),
        ("gradient fidelity", Box::new(|_: &mut Desk| gradient_fidelity())),
        ("uniform loss value", Box::new(|_: &mut Desk| uniform_loss())),
        ("desk training run", Box::new(desk_run)),
        ("radial ordering", Box::new(radial_ordering)),
        ("assignment heatmap", Box::new(heatmap_direction)),
        ("nucleus probe", Box::new(probe)),
        ("format round trips", Box::new(|d: &mut Desk| formats(d))),
        ("metric oracle", Box::new(|_: &mut Desk| metric_oracle())),
    ];
    let mut failed = 0;
    for (i, (name, mut run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| run(&mut desk)));
        let o = result.unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {:<20} {} [{:.1?}] {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

const GEOMETRY_SAMPLES: usize = 10_000;
const GEOMETRY_TOL: f64 = 1e-9;

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Uniform direction, hyperbolic radius uniform in `[0, 6)`.
fn ball_point(rng: &mut ChaCha8Rng, d: usize) -> BallPoint {
    let r = (rng.random::<f64>() * 3.0).tanh();
    BallPoint::new(unit(rng, d).into_iter().map(|x| r * x).collect(), Curvature::unit()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn geometry_identities() -> Outcome {
    let k = Curvature::unit();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 7];
    let names = [
        "left identity",
        "left inverse",
        "metric axioms",
        "d(0,z)",
        "d(0,exp0 v)",
        "busemann radial",
        "busemann lipschitz",
    ];
    for i in 0..GEOMETRY_SAMPLES {
        let d = [2, 3, 4, 8, 16][i % 5];
        let origin = BallPoint::origin(d);
        let x = ball_point(&mut rng, d);
        let y = ball_point(&mut rng, d);
        let z = ball_point(&mut rng, d);

        let e = mobius_add(&origin, &x, k).unwrap();
        worst[0] = worst[0].max(max_abs_diff(e.coords(), x.coords()));
        let neg = BallPoint::new(x.coords().iter().map(|v| -v).collect(), k).unwrap();
        worst[1] = worst[1].max(norm(mobius_add(&neg, &x, k).unwrap().coords()));

        let dxy = geodesic_distance(&x, &y, k).unwrap();
        let dyx = geodesic_distance(&y, &x, k).unwrap();
        let dyz = geodesic_distance(&y, &z, k).unwrap();
        let dxz = geodesic_distance(&x, &z, k).unwrap();
        let dxx = geodesic_distance(&x, &x, k).unwrap();
        let axioms = dxx
            .abs()
            .max((dxy - dyx).abs())
            .max((dxz - dxy - dyz).max(0.0))
            .max((-dxy).max(0.0));
        assert!(dxy > 0.0, "distinct points at distance zero");
        worst[2] = worst[2].max(axioms);

        let oracle = 2.0 * norm(x.coords()).atanh();
        worst[3] = worst[3].max((geodesic_distance(&origin, &x, k).unwrap() - oracle).abs());

        let v: Vec<f64> = {
            let len = 5.0 * rng.random::<f64>();
            unit(&mut rng, d).into_iter().map(|u| len * u).collect()
        };
        let ev = exp_map0(&TangentVector::new(v.clone()).unwrap(), k);
        let dv = geodesic_distance(&origin, &ev, k).unwrap();
        worst[4] = worst[4].max((dv - 2.0 * norm(&v)).abs());

        let c = IdealPoint::from_direction(&gaussian(&mut rng, d)).unwrap();
        let t = 0.999 * rng.random::<f64>();
        let tc = BallPoint::new(c.coords().iter().map(|u| t * u).collect(), k).unwrap();
        let radial = busemann(&c, &tc).unwrap() + geodesic_distance(&origin, &tc, k).unwrap();
        worst[5] = worst[5].max(
            radial
                .abs()
                .max((distance_from_origin(tc.coords(), k) - 2.0 * t.atanh()).abs()),
        );

        let lip = (busemann(&c, &x).unwrap() - busemann(&c, &y).unwrap()).abs() - dxy;
        worst[6] = worst[6].max(lip.max(0.0));
    }
    let pass = worst.iter().all(|w| *w <= GEOMETRY_TOL);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("{GEOMETRY_SAMPLES} samples each; worst: {detail}"))
}

// ---------------------------------------------------------------------------
// 2

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let errs = pipeline_grad_check(0..20, 1e-6).unwrap();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let elapsed = t.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("20 seeds, worst relative error {worst:.2e}, {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn uniform_loss() -> Outcome {
    let k = 32;
    let (b, m) = (8, 4);
    let batch = BatchAssignments::new(
        vec![AssignmentVector::uniform(k); b],
        vec![vec![AssignmentVector::uniform(k); m]; b],
    )
    .unwrap();
    let loss = hmsn_loss(&batch, LossWeights::new(10.0, 0.25).unwrap());
    let expected = -8.75 * 32f64.ln();
    outcome(
        (loss - expected).abs() <= 1e-6,
        format!("loss {loss:.9}, closed form {expected:.9}"),
    )
}

// ---------------------------------------------------------------------------
// 4 – 7

fn desk_config() -> TrainConfig {
    let cfg = TrainConfig::default();
    assert_eq!(
        (cfg.dim, cfg.prototypes, cfg.anchors, cfg.batch_size, cfg.epochs),
        (16, 32, 4, 64, 30),
        "desk defaults changed"
    );
    cfg
}

fn desk_run(desk: &mut Desk) -> Outcome {
    desk.slides = generate_corpus(
        &SubtypeProfile::default_set(),
        DESK_SLIDES,
        DESK_CORPUS_SEED,
        SLIDE_SIZE,
    )
    .unwrap();
    let t = Instant::now();
    let a = train(desk_config(), &desk.slides, &TrainOptions::default(), |_| {}).unwrap();
    let elapsed = t.elapsed();
    let b = train(desk_config(), &desk.slides, &TrainOptions::default(), |_| {}).unwrap();

    let first = a.history[0].loss;
    let last = a.history.last().unwrap().loss;
    let norm_dev = a
        .history
        .iter()
        .map(|h| h.prototype_norm_deviation)
        .fold(a.prototypes.max_norm_deviation(), f64::max);
    let repeat = a.history.len() == b.history.len()
        && a.history
            .iter()
            .zip(&b.history)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());
    let pass = elapsed <= Duration::from_secs(15 * 60) && last < first && norm_dev <= 1e-9 && repeat;
    desk.checkpoint = Some(a);
    outcome(
        pass,
        format!(
            "{elapsed:.1?} per run, loss epoch 1 {first:.6} → final {last:.6}, \
             max |‖c‖−1| {norm_dev:.1e}, identical repeat {repeat}"
        ),
    )
}

fn desk_embeddings(desk: &mut Desk) -> (&Checkpoint, &Embeddings) {
    let ck = desk.checkpoint.as_ref().expect("desk run did not complete");
    if desk.embeddings.is_none() {
        desk.embeddings = Some(embed_dataset(ck, &desk.slides).unwrap());
    }
    (ck, desk.embeddings.as_ref().unwrap())
}

fn mean_distance(emb: &Embeddings, tag: ViewTag) -> f64 {
    let (sum, n) = emb
        .of_tag(tag)
        .fold((0.0, 0usize), |(s, n), r| (s + r.distance(), n + 1));
    sum / n as f64
}

fn radial_ordering(desk: &mut Desk) -> Outcome {
    let (_, emb) = desk_embeddings(desk);
    let nucleus = mean_distance(emb, ViewTag::Nucleus);
    let tissue = mean_distance(emb, ViewTag::Tissue(0));
    let q = nucleus_share_by_quintile(emb).unwrap();
    outcome(
        nucleus > tissue && q[4] > q[0],
        format!(
            "mean d(0,·) nucleus {nucleus:.4} vs tissue-{} {tissue:.4}; nucleus share inner {:.3} outer {:.3}",
            emb.scales[0], q[0], q[4]
        ),
    )
}

fn heatmap_direction(desk: &mut Desk) -> Outcome {
    let (ck, emb) = desk_embeddings(desk);
    let h = assignment_heatmap(emb, &ck.prototypes, Temperature::ANCHOR).unwrap();
    let cell = |c, s| h.get(c, s).unwrap();
    let (cb_d, cb_r) = (
        cell(NucleusClass::Centroblast, Subtype::Dlbcl),
        cell(NucleusClass::Centroblast, Subtype::Reactive),
    );
    let (cc_r, cc_d) = (
        cell(NucleusClass::Centrocyte, Subtype::Reactive),
        cell(NucleusClass::Centrocyte, Subtype::Dlbcl),
    );
    outcome(
        cb_d > cb_r && cc_r > cc_d,
        format!("Centroblast DLBCL {cb_d:.6} vs Reactive {cb_r:.6}; Centrocyte Reactive {cc_r:.6} vs DLBCL {cc_d:.6}"),
    )
}

fn probe(desk: &mut Desk) -> Outcome {
    let ck = desk.checkpoint.as_ref().expect("desk run did not complete");
    let cfg = &ck.config;
    let data =
        NucleusDataset::from_slides(&desk.slides, DEFAULT_CLASS_COUNTS, cfg.nucleus_size, cfg.input_size, 0).unwrap();
    let t = Instant::now();
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let pc = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        assert_eq!(pc.folds, 4);
        pre.push(
            probe_train_eval(Some(ck), cfg.encoder_config(), &data, &pc)
                .unwrap()
                .mean
                .accuracy,
        );
        scratch.push(
            probe_train_eval(None, cfg.encoder_config(), &data, &pc)
                .unwrap()
                .mean
                .accuracy,
        );
    }
    let elapsed = t.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, s) = (mean(&pre), mean(&scratch));
    outcome(
        data.len() >= 600 && p >= s && elapsed <= Duration::from_secs(10 * 60),
        format!(
            "{} views, accuracy pretrained {p:.4} {pre:.4?} vs scratch {s:.4} {scratch:.4?}, {elapsed:.1?}",
            data.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

/// Section `(name, start, payload start, checksum offset)` found by walking
/// the container layout independently of the reader.
fn walk_sections(bytes: &[u8]) -> Vec<(String, usize, usize, usize)> {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    let count = u32_at(8);
    let mut pos = 12;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = pos;
        let name_len = u32_at(pos);
        let name = String::from_utf8(bytes[pos + 4..pos + 4 + name_len].to_vec()).unwrap();
        pos += 4 + name_len;
        let width = [4, 8, 4][bytes[pos] as usize];
        let ndim = u32_at(pos + 1);
        let elems: usize = (0..ndim).map(|i| u32_at(pos + 5 + 4 * i)).product();
        let payload = pos + 5 + 4 * ndim;
        pos = payload + elems * width;
        out.push((name, start, payload, pos));
        pos += 4;
    }
    assert_eq!(pos, bytes.len(), "layout walk did not consume the file");
    out
}

/// Saves, reloads and re-saves; then corrupts one payload byte per section
/// and truncates the file.
fn check_file<T>(
    path: &Path,
    magic: [u8; 4],
    load: impl Fn(&Path) -> msrl_core::Result<T>,
    save: impl Fn(&T, &Path) -> msrl_core::Result<()>,
) -> Result<usize, String> {
    let bytes = fs::read(path).unwrap();
    let back = load(path).map_err(|e| e.to_string())?;
    let again = path.with_extension("again");
    save(&back, &again).unwrap();
    if fs::read(&again).unwrap() != bytes {
        return Err(format!("{} does not re-save bit-exactly", path.display()));
    }
    let corrupt = path.with_extension("corrupt");
    let mut checked = 0;
    for (name, _, payload, crc) in walk_sections(&bytes) {
        if payload == crc {
            continue;
        }
        let mut bad = bytes.clone();
        bad[(payload + crc) / 2] ^= 0x5a;
        fs::write(&corrupt, &bad).unwrap();
        match load(&corrupt) {
            Err(Error::Container(ContainerError::Checksum { section, offset, .. }))
                if section == name && offset == crc =>
            {
                checked += 1
            }
            Err(e) => return Err(format!("section `{name}`: unexpected error {e}")),
            Ok(_) => return Err(format!("section `{name}`: corruption not detected")),
        }
    }
    let cut = bytes.len() - 3;
    fs::write(&corrupt, &bytes[..cut]).unwrap();
    match load(&corrupt) {
        Err(Error::Container(ContainerError::Truncated { offset, .. })) if offset == bytes.len() - 4 => {}
        Err(e) => return Err(format!("truncation: unexpected error {e}")),
        Ok(_) => return Err("truncation not detected".into()),
    }
    let _ = Container::from_bytes(&bytes, magic).map_err(|e| e.to_string())?;
    Ok(checked)
}

/// CRC32 of every corpus file for slides 0..6 of seed 42, by name.
const PINNED_CORPUS_CRC: u32 = 0x05d3_578a;

fn corpus_digest(dir: &Path) -> u32 {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut h = crc32fast::Hasher::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update(&fs::read(dir.join(&n)).unwrap());
    }
    h.finalize()
}

fn formats(desk: &mut Desk) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    let small = generate_corpus(&SubtypeProfile::default_set(), 6, 42, SLIDE_SIZE).unwrap();
    let ck = match desk.checkpoint.clone() {
        Some(ck) => ck,
        None => {
            let cfg = TrainConfig {
                epochs: 2,
                warmup_epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            };
            train(cfg, &small, &TrainOptions::default(), |_| {}).unwrap()
        }
    };
    let ck_path = dir.path().join("model.hmsb");
    ck.save(&ck_path).unwrap();
    match check_file(&ck_path, CHECKPOINT_MAGIC, Checkpoint::load, Checkpoint::save) {
        Ok(n) => notes.push(format!("checkpoint ok ({n} sections corrupted)")),
        Err(e) => {
            pass = false;
            notes.push(format!("checkpoint: {e}"));
        }
    }

    let emb = embed_dataset(&ck, &small).unwrap();
    let emb_path = dir.path().join("emb.hmse");
    emb.save(&emb_path).unwrap();
    match check_file(&emb_path, EMBEDDINGS_MAGIC, Embeddings::load, Embeddings::save) {
        Ok(n) => notes.push(format!("embeddings ok ({n} sections corrupted)")),
        Err(e) => {
            pass = false;
            notes.push(format!("embeddings: {e}"));
        }
    }

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    corpus::write_corpus(&a, &small).unwrap();
    let regenerated = generate_corpus(&SubtypeProfile::default_set(), 6, 42, SLIDE_SIZE).unwrap();
    corpus::write_corpus(&b, &regenerated).unwrap();
    let (da, db) = (corpus_digest(&a), corpus_digest(&b));
    let read_back = corpus::read_corpus(&a).unwrap() == small;
    let ok = da == db && da == PINNED_CORPUS_CRC && read_back;
    pass &= ok;
    notes.push(format!(
        "corpus crc {da:#010x} (rerun {db:#010x}, pinned {PINNED_CORPUS_CRC:#010x}), reads back {read_back}"
    ));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 9

/// Precision, recall and F1 per class from pair counts; undefined ratios are
/// zero.
fn brute_force(classes: usize, truth: &[usize], pred: &[usize]) -> Metrics {
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut hits = 0u64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&t, &y) in truth.iter().zip(pred) {
            match (t == c, y == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                (false, false) => {}
            }
        }
        hits += tp;
        p += frac(tp, tp + fp);
        r += frac(tp, tp + fneg);
        f += frac(2 * tp, 2 * tp + fp + fneg);
    }
    let k = classes as f64;
    Metrics {
        accuracy: frac(hits, truth.len() as u64),
        precision: p / k,
        recall: r / k,
        f1: f / k,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=200);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        // bias towards correct predictions so every regime appears
        let skill: f64 = rng.random();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| {
                if rng.random::<f64>() < skill {
                    t
                } else {
                    rng.random_range(0..classes)
                }
            })
            .collect();
        let got = Metrics::compute(classes, &truth, &pred).unwrap();
        let want = brute_force(classes, &truth, &pred);
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 random label/prediction sets, {mismatches} mismatches"),
    )
}
