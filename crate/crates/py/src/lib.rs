//! Python bindings for corpus generation, training, embedding analyses and
//! the ball geometry.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use msrl_core::analysis::{assignment_heatmap, embed_dataset, radial_histogram, Embeddings, ViewTag};
use msrl_core::corpus::{read_corpus, write_corpus};
use msrl_core::geometry::{self, BallPoint, Curvature, IdealPoint, TangentVector};
use msrl_core::gradcheck::pipeline_grad_check;
use msrl_core::loss::{hmsn_loss_terms, BatchAssignments, LossWeights};
use msrl_core::prototypes::{AssignmentVector, Temperature};
use msrl_core::synth::{generate_corpus as generate, SubtypeProfile};
use msrl_core::training::{resume, Checkpoint, TrainConfig, TrainOptions};
use msrl_core::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyTuple};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn point(z: Vec<f64>) -> PyResult<BallPoint> {
    BallPoint::new(z, Curvature::unit()).map_err(err)
}

/// `b_c(z)` for a unit-norm `c` and a point `z` of the unit ball.
#[pyfunction]
fn busemann(c: Vec<f64>, z: Vec<f64>) -> PyResult<f64> {
    geometry::busemann(&IdealPoint::new(c).map_err(err)?, &point(z)?).map_err(err)
}

#[pyfunction]
fn geodesic_distance(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    geometry::geodesic_distance(&point(x)?, &point(y)?, Curvature::unit()).map_err(err)
}

#[pyfunction]
fn mobius_add(x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(geometry::mobius_add(&point(x)?, &point(y)?, Curvature::unit())
        .map_err(err)?
        .into_inner())
}

#[pyfunction]
fn exp_map0(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(geometry::exp_map0(&TangentVector::new(v).map_err(err)?, Curvature::unit()).into_inner())
}

/// Objective and its three terms for `targets[B][K]` and
/// `anchors[B][M][K]` assignment vectors.
#[pyfunction]
#[pyo3(signature = (targets, anchors, lam = 10.0, beta = 0.25))]
fn hmsn_loss(
    targets: Vec<Vec<f64>>,
    anchors: Vec<Vec<Vec<f64>>>,
    lam: f64,
    beta: f64,
) -> PyResult<(f64, f64, f64, f64)> {
    let wrap = |p: Vec<f64>| AssignmentVector::new(p).map_err(err);
    let targets = targets.into_iter().map(wrap).collect::<PyResult<Vec<_>>>()?;
    let anchors = anchors
        .into_iter()
        .map(|g| g.into_iter().map(wrap).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    let batch = BatchAssignments::new(targets, anchors).map_err(err)?;
    let t = hmsn_loss_terms(&batch, LossWeights::new(lam, beta).map_err(err)?);
    Ok((t.total, t.cross_entropy, t.mean_entropy, t.anchor_entropy))
}

/// Writes a synthetic corpus and returns its nucleus count.
#[pyfunction]
#[pyo3(signature = (out, slides, seed, size = 256, profile_set = "default"))]
fn generate_corpus(
    py: Python<'_>,
    out: PathBuf,
    slides: u32,
    seed: u64,
    size: u32,
    profile_set: &str,
) -> PyResult<usize> {
    let profiles = SubtypeProfile::profile_set(profile_set).map_err(err)?;
    py.detach(|| {
        let corpus = generate(&profiles, slides, seed, size)?;
        write_corpus(&out, &corpus)?;
        Ok(corpus.iter().map(|s| s.nuclei.len()).sum())
    })
    .map_err(err)
}

/// Configuration value as the text the config parser expects.
fn setting(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.cast::<PyBool>() {
        return Ok(b.is_true().to_string());
    }
    if v.is_instance_of::<PyList>() || v.is_instance_of::<PyTuple>() {
        let parts = v
            .try_iter()?
            .map(|x| Ok(x?.str()?.to_string()))
            .collect::<PyResult<Vec<String>>>()?;
        return Ok(parts.join(","));
    }
    Ok(v.str()?.to_string())
}

type EpochRow = (usize, f64, f64, f64, f64, f64);

/// Trains on the corpus at `corpus` and writes the checkpoint to `out`.
/// `config` maps configuration keys to values; `log` is called with each
/// epoch's row. Returns the per-epoch rows.
#[pyfunction]
#[pyo3(signature = (corpus, out, config = None, log = None))]
fn train(
    py: Python<'_>,
    corpus: PathBuf,
    out: PathBuf,
    config: Option<HashMap<String, Bound<'_, PyAny>>>,
    log: Option<Py<PyAny>>,
) -> PyResult<Vec<EpochRow>> {
    let mut cfg = TrainConfig::default();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (k, v) in config.unwrap_or_default() {
        pairs.push((k, setting(&v)?));
    }
    // a preset replaces everything, so it must come first
    pairs.sort_by_key(|(k, _)| k != "profile");
    for (k, v) in &pairs {
        cfg.set(k, v).map_err(err)?;
    }
    cfg.corpus = Some(corpus.clone());
    cfg.validate().map_err(err)?;
    let mut callback_err: Option<PyErr> = None;
    let result = py.detach(|| {
        let slides = read_corpus(&corpus)?;
        let opts = TrainOptions {
            checkpoint_path: Some(out.clone()),
            ..TrainOptions::default()
        };
        let mut rows = Vec::new();
        resume(Checkpoint::init(cfg)?, &slides, &opts, |e| {
            let row = (e.epoch, e.lr, e.loss, e.cross_entropy, e.mean_entropy, e.anchor_entropy);
            rows.push(row);
            if let (Some(f), None) = (&log, &callback_err) {
                if let Err(e) = Python::attach(|py| f.bind(py).call1(row).map(drop)) {
                    callback_err = Some(e);
                }
            }
        })?;
        Ok(rows)
    });
    if let Some(e) = callback_err {
        return Err(e);
    }
    result.map_err(err)
}

/// Embeds a corpus with a checkpoint; returns the number of records.
#[pyfunction]
fn embed(py: Python<'_>, ckpt: PathBuf, corpus: PathBuf, out: PathBuf) -> PyResult<usize> {
    py.detach(|| {
        let ck = Checkpoint::load(&ckpt)?;
        let emb = embed_dataset(&ck, &read_corpus(&corpus)?)?;
        emb.save(&out)?;
        Ok(emb.records.len())
    })
    .map_err(err)
}

/// Columns of an embeddings file. Missing labels are `None`.
#[pyfunction]
fn load_embeddings<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let e = Embeddings::load(&path).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("dim", e.dim)?;
    d.set_item("scales", e.scales.clone())?;
    d.set_item("coords", e.records.iter().map(|r| r.coords.clone()).collect::<Vec<_>>())?;
    d.set_item("pre", e.records.iter().map(|r| r.pre.clone()).collect::<Vec<_>>())?;
    d.set_item("kind", e.records.iter().map(|r| e.kind_name(r.tag)).collect::<Vec<_>>())?;
    d.set_item(
        "nucleus",
        e.records.iter().map(|r| r.tag == ViewTag::Nucleus).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "subtype",
        e.records
            .iter()
            .map(|r| r.subtype.map(|s| s.to_string()))
            .collect::<Vec<_>>(),
    )?;
    d.set_item(
        "cell_class",
        e.records
            .iter()
            .map(|r| r.cell_class.map(|c| c.to_string()))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("slide", e.records.iter().map(|r| r.slide).collect::<Vec<_>>())?;
    d.set_item("distance", e.records.iter().map(|r| r.distance()).collect::<Vec<_>>())?;
    Ok(d)
}

/// Radial histogram of an embeddings file as TSV.
#[pyfunction]
#[pyo3(signature = (emb, bins = 20))]
fn radial_tsv(emb: PathBuf, bins: usize) -> PyResult<String> {
    Ok(radial_histogram(&Embeddings::load(&emb).map_err(err)?, bins)
        .map_err(err)?
        .to_tsv())
}

/// `{class: {subtype: assignment degree}}`; `tau` defaults to the
/// checkpoint's anchor temperature.
#[pyfunction]
#[pyo3(signature = (emb, ckpt, tau = None))]
fn heatmap(emb: PathBuf, ckpt: PathBuf, tau: Option<f64>) -> PyResult<HashMap<String, HashMap<String, f64>>> {
    let ck = Checkpoint::load(&ckpt).map_err(err)?;
    let tau = match tau {
        Some(t) => Temperature::new(t).map_err(err)?,
        None => ck.temperatures().map_err(err)?.1,
    };
    let t = assignment_heatmap(&Embeddings::load(&emb).map_err(err)?, &ck.prototypes, tau).map_err(err)?;
    Ok(t.classes
        .iter()
        .zip(&t.cells)
        .map(|(c, row)| {
            let cols = t.subtypes.iter().zip(row).map(|(s, v)| (s.to_string(), *v)).collect();
            (c.to_string(), cols)
        })
        .collect())
}

/// Per-seed relative error of the end-to-end gradient check.
#[pyfunction]
#[pyo3(signature = (seeds = 20, step = 1e-6))]
fn grad_check(py: Python<'_>, seeds: u64, step: f64) -> PyResult<Vec<f64>> {
    py.detach(|| pipeline_grad_check(0..seeds, step))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Slide count of a corpus directory.
#[pyfunction]
fn corpus_size(dir: PathBuf) -> PyResult<usize> {
    Ok(read_corpus(Path::new(&dir)).map_err(err)?.len())
}

#[pymodule]
pub fn msrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(busemann, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mobius_add, m)?)?;
    m.add_function(wrap_pyfunction!(exp_map0, m)?)?;
    m.add_function(wrap_pyfunction!(hmsn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_size, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(radial_tsv, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
