//! Python module `suan`: the weighting, label-set, evaluation and bound
//! primitives plus whole-experiment runs driven by a TOML document.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use suan_core::bound::{self, BoundInputs};
use suan_core::eval::{infer_probs, uda_accuracy as core_uda_accuracy, Decision, Prediction};
use suan_core::experiment;
use suan_core::scenario::{self, LabelSets};
use suan_core::weighting;
use suan_core::{config, Domain, Matrix2, NormalizationConfig, SuanError, WeightBatch};

fn py_err(e: SuanError) -> PyErr {
    match e {
        SuanError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix2> {
    Matrix2::from_rows(rows).map_err(py_err)
}

/// `(pseudo_label, margin)` of one probability row.
#[pyfunction]
fn prediction_margin(probs: Vec<f64>) -> PyResult<(usize, f64)> {
    weighting::prediction_margin(&probs).map_err(py_err)
}

/// Per-class mean margin over rows pseudo-labelled with each class.
#[pyfunction]
fn batch_margin_vector(probs: Vec<Vec<f64>>, num_classes: usize) -> PyResult<Vec<f64>> {
    weighting::batch_margin_vector(&matrix(&probs)?, num_classes).map_err(py_err)
}

/// Min-max normalization to batch mean one, shifted by `w0` and clamped at zero.
#[pyfunction]
#[pyo3(signature = (weights, w0=0))]
fn normalize_weights(weights: Vec<f64>, w0: u8) -> PyResult<Vec<f64>> {
    let cfg = NormalizationConfig::new(w0, weights.len()).map_err(py_err)?;
    weighting::normalize_weights(&WeightBatch::new(weights, Domain::Source), &cfg)
        .map(|w| w.values)
        .map_err(py_err)
}

/// Running mean of accepted batch margin vectors.
#[pyclass(name = "MarginRegister")]
struct PyMarginRegister {
    inner: weighting::MarginRegister,
}

#[pymethods]
impl PyMarginRegister {
    #[new]
    fn new(num_classes: usize) -> Self {
        Self {
            inner: weighting::MarginRegister::new(num_classes),
        }
    }

    fn update(&mut self, margins: Vec<f64>) -> PyResult<()> {
        self.inner.update(&margins).map_err(py_err)
    }

    #[getter]
    fn vector(&self) -> Vec<f64> {
        self.inner.vector().to_vec()
    }

    #[getter]
    fn update_count(&self) -> u64 {
        self.inner.update_count()
    }

    /// Class-wise source weights `V[y]` for a batch of labels.
    fn source_weights(&self, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        weighting::source_weights(&self.inner, &labels).map(|w| w.values).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("MarginRegister(vector={:?}, update_count={})", self.inner.vector(), self.inner.update_count())
    }
}

/// |C_s ∩ C_t| / |C_s ∪ C_t| of two class lists.
#[pyfunction]
fn jaccard_index(source_classes: Vec<usize>, target_classes: Vec<usize>) -> PyResult<f64> {
    scenario::jaccard_index(&LabelSets::new(source_classes, target_classes)).map_err(py_err)
}

#[pyfunction]
fn xi_from_fractions(alpha: f64, beta: f64) -> PyResult<f64> {
    scenario::xi_from_fractions(alpha, beta).map_err(py_err)
}

/// Known class index, or `None` for unknown.
#[pyfunction]
#[pyo3(signature = (probs, threshold=0.5))]
fn infer(probs: Vec<f64>, threshold: f64) -> PyResult<Option<usize>> {
    Ok(match infer_probs(&probs, threshold).map_err(py_err)?.decision {
        Decision::Known(c) => Some(c),
        Decision::Unknown => None,
    })
}

/// Averaged accuracy over the common classes plus the unknown class.
#[pyfunction]
#[pyo3(signature = (probs, labels, source_classes, target_classes, threshold=0.5))]
fn uda_accuracy(
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    source_classes: Vec<usize>,
    target_classes: Vec<usize>,
    threshold: f64,
) -> PyResult<f64> {
    let preds: Vec<Prediction> = probs
        .iter()
        .map(|r| infer_probs(r, threshold))
        .collect::<Result<_, _>>()
        .map_err(py_err)?;
    let ls = LabelSets::new(source_classes, target_classes);
    Ok(core_uda_accuracy(&preds, &labels, &ls, threshold).map_err(py_err)?.averaged_accuracy)
}

#[pyfunction]
#[pyo3(signature = (d, gamma, m_prime, delta=bound::DEFAULT_DELTA))]
fn complexity_term(d: usize, gamma: f64, m_prime: f64, delta: f64) -> PyResult<f64> {
    bound::complexity_term(d, gamma, m_prime, delta).map_err(py_err)
}

/// Bound decomposition as a dict with keys source_risk, divergence_term,
/// complexity, lambda and total.
#[pyfunction]
#[pyo3(signature = (vc_dim, gamma, m_prime, source_risk, empirical_divergence, lambda_, delta=bound::DEFAULT_DELTA))]
#[allow(clippy::too_many_arguments)]
fn risk_bound<'py>(
    py: Python<'py>,
    vc_dim: usize,
    gamma: f64,
    m_prime: f64,
    source_risk: f64,
    empirical_divergence: f64,
    lambda_: f64,
    delta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let inputs = BoundInputs {
        vc_dim,
        gamma,
        m_prime,
        delta,
        source_risk,
        empirical_divergence,
        lambda: lambda_,
    };
    let d = bound::bound_decomposition(&inputs).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("source_risk", d.source_risk)?;
    out.set_item("divergence_term", d.divergence_term)?;
    out.set_item("complexity", d.complexity)?;
    out.set_item("lambda", d.lambda)?;
    out.set_item("total", d.total)?;
    Ok(out)
}

/// The configuration with every default filled in, as TOML.
#[pyfunction]
#[pyo3(signature = (text=""))]
fn normalize_config(text: &str) -> PyResult<String> {
    config::emit_config(&config::parse_config(text).map_err(py_err)?).map_err(py_err)
}

/// Runs one experiment from a TOML document and writes its reports to
/// `out_dir`. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config_text, out_dir, seed=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_text: &str,
    out_dir: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config::parse_config(config_text).map_err(py_err)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let outcome = py
        .detach(|| experiment::run_experiment(&cfg, Path::new(out_dir)))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mode", cfg.train.mode.as_str())?;
    out.set_item("seed", cfg.seed)?;
    out.set_item("averaged_accuracy", outcome.report.averaged_accuracy)?;
    out.set_item("register", outcome.fit.register.vector().to_vec())?;
    out.set_item("register_updates", outcome.fit.register.update_count())?;
    out.set_item("w0", outcome.fit.w0)?;
    out.set_item("bound", outcome.bound.map(|b| b.decomposition.total))?;
    Ok(out)
}

/// `(name, passed, detail)` for every built-in invariant check.
#[pyfunction]
fn run_checks() -> Vec<(String, bool, String)> {
    suan_core::check::run_checks()
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn suan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMarginRegister>()?;
    m.add_function(wrap_pyfunction!(prediction_margin, m)?)?;
    m.add_function(wrap_pyfunction!(batch_margin_vector, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_index, m)?)?;
    m.add_function(wrap_pyfunction!(xi_from_fractions, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(uda_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_term, m)?)?;
    m.add_function(wrap_pyfunction!(risk_bound, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
