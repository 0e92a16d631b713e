//! Python bindings: the classifier, its energy, pseudo-label selection,
//! the two-moons generator, evaluation and the experiment runner.
//!
//! Inputs are plain Python lists; a batch of points is a list of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ecst::data::{gen_two_moons, Domain, LabeledSet, UnlabeledSet};
use ecst::harness::experiment::run_experiment as run;
use ecst::harness::{evaluate as eval_set, gradcheck, ExperimentConfig};
use ecst::model::{self, MlpParams};
use ecst::numerics::{self, Matrix, Rng};
use ecst::selftrain::{self, Thresholds};

fn err(e: ecst::Error) -> PyErr {
    match e {
        ecst::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Feed-forward tanh classifier with a linear output layer.
#[pyclass(name = "Mlp", from_py_object)]
#[derive(Clone)]
pub struct PyMlp {
    inner: MlpParams,
}

#[pymethods]
impl PyMlp {
    /// Glorot-initialized network with layer sizes `[D, hidden..., K]`.
    #[new]
    #[pyo3(signature = (layer_dims, seed=0))]
    fn new(layer_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        let inner = MlpParams::init(&layer_dims, &mut Rng::new(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(layer_dims: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: MlpParams::zeros(&layer_dims).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims().to_vec()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    fn set_flat(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat(&flat).map_err(err)
    }

    /// Logits `f(x)`.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(err)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&x).map_err(err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(err)
    }

    /// `E(x) = -logsumexp(f(x))`.
    fn energy(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(ecst::energy::energy(&self.inner, &x).map_err(err)?.value())
    }

    fn energy_grad_input(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        ecst::energy::energy_grad_input(&self.inner, &x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Mlp(layer_dims={:?})", self.inner.layer_dims())
    }
}

#[pyfunction]
fn softmax(z: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax(&z).map_err(err)
}

#[pyfunction]
fn log_sum_exp(z: Vec<f64>) -> PyResult<f64> {
    numerics::log_sum_exp(&z).map_err(err)
}

/// Per-class thresholds from the most confident `portion` of each class.
#[pyfunction]
fn estimate_thresholds(mlp: &PyMlp, features: Vec<Vec<f64>>, portion: f64) -> PyResult<Vec<f64>> {
    let target = UnlabeledSet::new(matrix(features)?, Domain::Target).map_err(err)?;
    Ok(selftrain::estimate_thresholds(&mlp.inner, &target, portion)
        .map_err(err)?
        .lambda)
}

/// Same, from `(predicted class, confidence)` pairs.
#[pyfunction]
fn thresholds_from_predictions(
    predictions: Vec<(usize, f64)>,
    n_classes: usize,
    portion: f64,
) -> PyResult<Vec<f64>> {
    Ok(
        selftrain::thresholds_from_predictions(&predictions, n_classes, portion)
            .map_err(err)?
            .lambda,
    )
}

/// Pseudo-label of one probability vector: the class maximizing `p / λ` if
/// it clears its threshold, else `None`.
#[pyfunction]
fn select_class(probs: Vec<f64>, thresholds: Vec<f64>) -> PyResult<Option<usize>> {
    let th = Thresholds::new(thresholds, 1.0).map_err(err)?;
    Ok(selftrain::select_class(&probs, &th))
}

/// Pseudo-labels for every row of `features`; `None` marks unselected rows.
#[pyfunction]
fn solve_pseudo_labels(
    mlp: &PyMlp,
    features: Vec<Vec<f64>>,
    portion: f64,
) -> PyResult<Vec<Option<usize>>> {
    let target = UnlabeledSet::new(matrix(features)?, Domain::Target).map_err(err)?;
    let th = selftrain::estimate_thresholds(&mlp.inner, &target, portion).map_err(err)?;
    let labels = selftrain::solve_pseudo_labels(&mlp.inner, &target, &th).map_err(err)?;
    Ok(labels.iter().map(|l| l.class()).collect())
}

/// Source moons and a rotated target. Returns a dict with `source_x`,
/// `source_y`, `target_x` and `target_y` (the held-out target labels).
#[pyfunction]
#[pyo3(signature = (n_per_domain=1000, rotation_degrees=30.0, noise_std=0.1, seed=0))]
fn two_moons<'py>(
    py: Python<'py>,
    n_per_domain: usize,
    rotation_degrees: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let split = gen_two_moons(n_per_domain, rotation_degrees, noise_std, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("source_x", rows(split.source.features()))?;
    d.set_item("source_y", split.source.labels().to_vec())?;
    d.set_item("target_x", rows(split.target.features()))?;
    d.set_item("target_y", split.target_eval.labels().to_vec())?;
    Ok(d)
}

/// Confusion matrix, per-class accuracy and mean class accuracy.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    mlp: &PyMlp,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let k = mlp.inner.n_classes();
    let set = LabeledSet::new(matrix(features)?, labels, k, Domain::TargetEval).map_err(err)?;
    let e = eval_set(&mlp.inner, &set).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("confusion", e.confusion)?;
    d.set_item("per_class_accuracy", e.per_class_accuracy)?;
    d.set_item("mean_class_accuracy", e.mean_class_accuracy)?;
    Ok(d)
}

/// Largest relative error of the finite-difference suite.
#[pyfunction]
#[pyo3(signature = (n_configs=100, seed=0))]
fn gradcheck_max_error(py: Python<'_>, n_configs: usize, seed: u64) -> PyResult<f64> {
    let report = py
        .detach(|| gradcheck::run_suite(n_configs, seed))
        .map_err(err)?;
    Ok(report.max_rel_err())
}

/// Runs a full experiment from TOML config text. Writes artifacts when
/// `out_dir` is given. Returns the summary plus per-round mean accuracies.
#[pyfunction]
#[pyo3(signature = (config_toml="", out_dir=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_toml: &str,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    let outcome = py.detach(|| run(&cfg, out_dir.as_deref())).map_err(err)?;
    let s = &outcome.summary;
    let d = PyDict::new(py);
    d.set_item("seed", s.seed)?;
    d.set_item("alpha", s.alpha)?;
    d.set_item("baseline_mean_acc", s.baseline_mean_acc)?;
    d.set_item("final_mean_acc", s.final_mean_acc)?;
    d.set_item("improvement", s.improvement)?;
    d.set_item("budget_violations", s.budget_violations)?;
    let per_round: Vec<Option<f64>> = outcome.rows.iter().map(|r| r.mean_accuracy()).collect();
    d.set_item("round_mean_acc", per_round)?;
    d.set_item(
        "final_model",
        PyMlp {
            inner: outcome.final_params,
        },
    )?;
    Ok(d)
}

#[pymodule]
pub fn ecst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMlp>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(thresholds_from_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(select_class, m)?)?;
    m.add_function(wrap_pyfunction!(solve_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_max_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
