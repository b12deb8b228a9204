//! Python bindings: the run configuration, the FLOPS accounting, and the
//! pure building blocks (SSIM, region selection, schedule execution,
//! gradient verification) exposed with plain lists and tuples.
//!
//! Build with `cargo build -p saccade-py --release`; the resulting
//! `libsaccade.so` imports directly as the `saccade` module (see
//! `python/smoke_test.py`).

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use saccade_core::attention::AttentionMap;
use saccade_core::config::RunConfig;
use saccade_core::cost;
use saccade_core::gradcheck::run_registry;
use saccade_core::hallucinator::{ssim as ssim_core, SsimParams};
use saccade_core::pipeline::{build_cost_table, cost_breakdown_for};
use saccade_core::spatial::{connected_regions, suppress, top_k_regions, Adjacency};
use saccade_core::temporal;
use saccade_core::tensor::Tensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor3(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::from_vec(&[shape.0, shape.1, shape.2], data).map_err(err)
}

fn parse_adjacency(name: &str) -> PyResult<Adjacency> {
    match name {
        "manhattan2" => Ok(Adjacency::Manhattan2),
        "eightway" => Ok(Adjacency::EightWay),
        other => Err(err(format!(
            "adjacency must be \"manhattan2\" or \"eightway\", got {other:?}"
        ))),
    }
}

/// A validated run configuration, parsed from the same `key=value` text the
/// command line accepts; construct with no argument for the defaults.
#[pyclass(frozen, module = "saccade")]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let cfg = match text {
            Some(t) => RunConfig::from_text(t).map_err(err)?,
            None => RunConfig::default(),
        };
        cfg.validate().map_err(err)?;
        Ok(Config { inner: cfg })
    }

    /// The full configuration as canonical `key=value` lines.
    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Config(seed={}, t={}, image={}x{}, k={}, m={}, theta_e={})",
            c.seed, c.t, c.image_h, c.image_w, c.k, c.m, c.theta_e
        )
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[getter]
    fn t(&self) -> usize {
        self.inner.t
    }
    #[getter]
    fn image_h(&self) -> usize {
        self.inner.image_h
    }
    #[getter]
    fn image_w(&self) -> usize {
        self.inner.image_w
    }
    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }
    #[getter]
    fn crop(&self) -> usize {
        self.inner.crop
    }
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }
    /// Backbone cut point (`lambda` in the config text; renamed because
    /// `lambda` is a Python keyword).
    #[getter]
    fn lambda_(&self) -> usize {
        self.inner.lambda
    }
    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
    #[getter]
    fn theta_e(&self) -> f64 {
        self.inner.theta_e
    }
    #[getter]
    fn theta_h(&self) -> [f64; 3] {
        self.inner.theta_h
    }
    #[getter]
    fn tau_s(&self) -> f64 {
        self.inner.tau_s
    }
    #[getter]
    fn adjacency(&self) -> &'static str {
        match self.inner.adjacency {
            Adjacency::Manhattan2 => "manhattan2",
            Adjacency::EightWay => "eightway",
        }
    }
    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }
    #[getter]
    fn n_train(&self) -> usize {
        self.inner.n_train
    }
    #[getter]
    fn n_eval(&self) -> usize {
        self.inner.n_eval
    }
    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }
    #[getter]
    fn momentum(&self) -> f64 {
        self.inner.momentum
    }
}

/// Per-frame FLOPS decomposition for a configuration, as a dict with the
/// component costs plus `o_pre`, `o_rest`, and `o_full = o_pre + o_rest`.
#[pyfunction]
fn cost_breakdown(cfg: &Config) -> PyResult<BTreeMap<String, f64>> {
    let cb = cost_breakdown_for(&cfg.inner).map_err(err)?;
    Ok(BTreeMap::from([
        ("first_half".into(), cb.first_half),
        ("hallucinator".into(), cb.hallucinator),
        ("skip_policy".into(), cb.skip_policy),
        ("second_half".into(), cb.second_half),
        ("crops".into(), cb.crops),
        ("classifier".into(), cb.classifier),
        ("o_pre".into(), cb.o_pre),
        ("o_rest".into(), cb.o_rest),
        ("o_full".into(), cb.o_full),
    ]))
}

/// Whole-backbone cost at each square input side, `[(side, flops), ...]`.
#[pyfunction]
fn scaling_curve(cfg: &Config, sides: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    let table = build_cost_table(&cfg.inner).map_err(err)?;
    let c_in = saccade_core::pipeline::IMAGE_CHANNELS + 2;
    cost::scaling_curve(&table, c_in, &sides).map_err(err)
}

/// Compute actually spent by a schedule; normalized, it lands in (0, 1]
/// with 1 exactly when every frame ran fully.
#[pyfunction]
#[pyo3(signature = (cfg, n_full, n_pre, n_skip, normalize=true))]
fn efficiency_loss(
    cfg: &Config,
    n_full: usize,
    n_pre: usize,
    n_skip: usize,
    normalize: bool,
) -> PyResult<f64> {
    let cb = cost_breakdown_for(&cfg.inner).map_err(err)?;
    Ok(cost::efficiency_loss(n_full, n_pre, n_skip, &cb, normalize))
}

/// Compute spent per accuracy point: `avg_gflops / top1_percent`.
#[pyfunction]
fn tradeoff(avg_gflops: f64, top1_percent: f64) -> PyResult<f64> {
    cost::tradeoff(avg_gflops, top1_percent).map_err(err)
}

/// How many times cheaper the model runs than its reference.
#[pyfunction]
fn speedup(reference: f64, model: f64) -> PyResult<f64> {
    cost::speedup(reference, model).map_err(err)
}

/// Structural similarity of two `[C, H, W]` attention maps given as flat
/// row-major lists; both are max-normalized first.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    let a = AttentionMap::raw(tensor3(a, shape)?);
    let b = AttentionMap::raw(tensor3(b, shape)?);
    ssim_core(&a, &b, SsimParams::default()).map_err(err)
}

/// Threshold a `[C, H, W]` attention map at `tau_s` times its maximum,
/// split the surviving cells into connected regions, and rank the top `k`.
/// Returns `[(rank, score, (centroid_row, centroid_col), cells), ...]`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn select_regions(
    attention: Vec<f64>,
    shape: (usize, usize, usize),
    tau_s: f64,
    adjacency: &str,
    k: usize,
) -> PyResult<Vec<(usize, f64, (f64, f64), Vec<(usize, usize)>)>> {
    if !(tau_s > 0.0 && tau_s < 1.0) {
        return Err(err(format!("tau_s must be in (0,1), got {tau_s}")));
    }
    let adjacency = parse_adjacency(adjacency)?;
    let map = AttentionMap::raw(tensor3(attention, shape)?);
    let mask = suppress(&map, tau_s);
    let regions = connected_regions(&mask, adjacency);
    Ok(top_k_regions(&map, &regions, k)
        .into_iter()
        .map(|r| (r.rank, r.score, r.centroid, r.cells))
        .collect())
}

/// Argmax over relaxed decision scores; ties break toward the smaller
/// skip range.
#[pyfunction]
fn decide(scores: Vec<f64>) -> PyResult<usize> {
    if scores.is_empty() {
        return Err(err("decide needs at least one score"));
    }
    Ok(temporal::decide(&scores))
}

/// Lay out a `t`-frame schedule from per-frame decisions (0 = run fully,
/// `m` in 1..=`m_max` = pre-scan then skip `m-1` frames).  `decisions` is
/// indexed by frame; entries where no decision is due are ignored.  Frame 0
/// is the forced-FULL warm-up.  Returns `[(status, flops_charged,
/// source_frame), ...]` with status one of "FULL", "PRESCAN", "SKIP".
#[pyfunction]
fn execute_schedule(
    t: usize,
    m_max: usize,
    o_full: f64,
    o_pre: f64,
    decisions: Vec<usize>,
) -> PyResult<Vec<(String, f64, usize)>> {
    if decisions.len() != t {
        return Err(err(format!(
            "decisions has {} entries for {t} frames",
            decisions.len()
        )));
    }
    if m_max == 0 {
        return Err(err("m_max must be at least 1"));
    }
    Ok(temporal::execute_schedule(t, m_max, o_full, o_pre, |frame| decisions[frame])
        .into_iter()
        .map(|d| (d.status.to_string(), d.flops_charged, d.source_frame))
        .collect())
}

/// Check every registered analytic gradient against central finite
/// differences.  Returns `[(op, max_rel_err, threshold, pass), ...]`;
/// `corrupt` biases one op's gradient as a negative control.
#[pyfunction]
#[pyo3(signature = (corrupt=None))]
fn gradcheck(corrupt: Option<&str>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let reports = run_registry(corrupt);
    if let Some(op) = corrupt {
        if !reports.iter().any(|r| r.op == op) {
            return Err(err(format!("no registered op named {op:?}")));
        }
    }
    Ok(reports
        .into_iter()
        .map(|r| (r.op, r.max_rel_err, r.threshold, r.pass))
        .collect())
}

#[pymodule]
fn saccade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(cost_breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_curve, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tradeoff, m)?)?;
    m.add_function(wrap_pyfunction!(speedup, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(select_regions, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(execute_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
