//! Python bindings. Matrices cross the boundary as lists of row lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use toa_core::attention::{effective_operator, forward_head};
use toa_core::operators::{collapse_probe, realization_error, realize_with_toa, square_suite};
use toa_core::synthetic::{self, extract_operator, Checkpoint, ModelConfig, SyntheticSpec, TrainConfig};
use toa_core::theory::{self, Probe, ProbeConfig};
use toa_core::{Error, HeadParams, Matrix, SorConfig, SorState, ToaVariant};

type Rows = Vec<Vec<f64>>;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Shape { .. }
        | Error::Config(_)
        | Error::Precondition(_)
        | Error::InvalidDropRate(_)
        | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Rows) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    let n = rows.len();
    Ok(Matrix::from_fn(n, cols, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn series(values: Vec<f64>) -> Matrix {
    let n = values.len();
    Matrix::from_fn(1, n, |_, j| values[j])
}

fn variant(name: &str) -> PyResult<ToaVariant> {
    name.parse().map_err(to_py_err)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// One attention head with its own parameters.
#[pyclass(name = "Head", module = "toa_py")]
struct PyHead {
    params: HeadParams,
    variant: ToaVariant,
}

#[pymethods]
impl PyHead {
    #[new]
    #[pyo3(signature = (variant, seq_len, model_dim, head_dim, value_dim, sigma_m = 1e-3, seed = 0))]
    fn new(
        variant: &str,
        seq_len: usize,
        model_dim: usize,
        head_dim: usize,
        value_dim: usize,
        sigma_m: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let v = self::variant(variant)?;
        if seq_len == 0 || model_dim == 0 || head_dim == 0 || value_dim == 0 {
            return Err(PyValueError::new_err("dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: HeadParams::init(v, seq_len, model_dim, head_dim, value_dim, sigma_m, &mut rng),
            variant: v,
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.variant.name()
    }

    /// Output of the head on tokens `h` (N × d). SOR is applied when
    /// `sor_seed` is given.
    #[pyo3(signature = (h, sor_seed = None))]
    fn forward(&self, h: Rows, sor_seed: Option<u64>) -> PyResult<Rows> {
        let h = matrix(h)?;
        let mut sor = match sor_seed {
            Some(seed) => SorState::new(SorConfig {
                seed,
                ..SorConfig::default()
            }),
            None => SorState::disabled(),
        };
        let (out, _) = forward_head(&h, &self.params, self.variant, &mut sor).map_err(to_py_err)?;
        Ok(rows(&out))
    }

    /// The N × N matrix the head applies to its values for input `h`.
    fn effective_operator(&self, h: Rows) -> PyResult<Rows> {
        let op = effective_operator(&matrix(h)?, &self.params, self.variant).map_err(to_py_err)?;
        Ok(rows(&op))
    }

    /// Max deviation of the softmax kernel from uniform on `alpha · h`.
    fn collapse(&self, h: Rows, alphas: Vec<f64>) -> PyResult<Vec<f64>> {
        let points = collapse_probe(&self.params, &matrix(h)?, &alphas).map_err(to_py_err)?;
        Ok(points.iter().map(|p| p.max_deviation).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Head(variant={:?}, seq_len={}, head_dim={})",
            self.variant.name(),
            self.params.seq_len(),
            self.params.head_dim()
        )
    }
}

/// A trained synthetic-benchmark model.
#[pyclass(name = "Model", module = "toa_py")]
struct PyModel {
    checkpoint: Checkpoint,
    model: synthetic::Model,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint written by `toa train` (or by `to_json`).
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let checkpoint = Checkpoint::from_json(text).map_err(to_py_err)?;
        let model = checkpoint.decode_model().map_err(to_py_err)?;
        Ok(Self { checkpoint, model })
    }

    fn to_json(&self) -> PyResult<String> {
        self.checkpoint.to_json().map_err(to_py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.variant().name()
    }

    #[getter]
    fn length(&self) -> usize {
        self.checkpoint.data.length
    }

    #[getter]
    fn final_eval_mse(&self) -> f64 {
        self.checkpoint.final_eval_mse
    }

    /// Denoised reconstruction of one noisy series of the model's length.
    fn predict(&self, noisy: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = self.model.predict(&series(noisy)).map_err(to_py_err)?;
        Ok(y.row(0).to_vec())
    }

    /// Per-layer, per-head effective operators for one noisy series, as
    /// `(layer, head, matrix)` tuples.
    fn operators(&self, noisy: Vec<f64>) -> PyResult<Vec<(usize, usize, Rows)>> {
        let ops = extract_operator(&self.model, &series(noisy)).map_err(to_py_err)?;
        Ok(ops.into_iter().map(|o| (o.layer, o.head, rows(&o.matrix))).collect())
    }
}

/// Draws `count` samples; each is a dict with `regime`, `phase`, `noisy`
/// and `clean`.
#[pyfunction]
#[pyo3(signature = (count, short = false, seed = 0, noise_sigma = None))]
fn generate<'py>(
    py: Python<'py>,
    count: usize,
    short: bool,
    seed: u64,
    noise_sigma: Option<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut spec = if short {
        SyntheticSpec::short()
    } else {
        SyntheticSpec::default()
    };
    spec.seed = seed;
    if let Some(s) = noise_sigma {
        spec.noise_sigma = s;
    }
    let samples = synthetic::generate(&spec, count).map_err(to_py_err)?;
    samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("regime", s.regime.to_string())?;
            d.set_item("phase", s.phase)?;
            d.set_item("noisy", s.noisy.row(0).to_vec())?;
            d.set_item("clean", s.clean.row(0).to_vec())?;
            Ok(d)
        })
        .collect()
}

/// Trains a model on the synthetic benchmark and returns it with its loss
/// curve as `(step, loss)` pairs.
#[pyfunction]
#[pyo3(signature = (variant, short = true, steps = None, lr = None, sor = None, seed = 0))]
fn train(
    py: Python<'_>,
    variant: &str,
    short: bool,
    steps: Option<usize>,
    lr: Option<f64>,
    sor: Option<bool>,
    seed: u64,
) -> PyResult<(PyModel, Vec<(usize, f64)>)> {
    let v = self::variant(variant)?;
    let data = if short {
        SyntheticSpec::short()
    } else {
        SyntheticSpec::default()
    };
    let mut model_cfg = ModelConfig::new(v);
    if let Some(on) = sor {
        model_cfg.sor.enabled = on;
    }
    let mut train_cfg = if short {
        TrainConfig::short()
    } else {
        TrainConfig::default()
    };
    train_cfg.seed = seed;
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    if let Some(lr) = lr {
        train_cfg.learning_rate = lr;
    }
    let outcome = py
        .detach(|| synthetic::train(&model_cfg, &train_cfg, &data))
        .map_err(to_py_err)?;
    let checkpoint = Checkpoint::new(&outcome.model, &data, &train_cfg, outcome.final_eval_mse);
    let curve = outcome.curve.iter().map(|r| (r.step, r.loss)).collect();
    Ok((
        PyModel {
            checkpoint,
            model: outcome.model,
        },
        curve,
    ))
}

/// Runs one named theory probe and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (name, gap_steps = None))]
fn run_probe<'py>(py: Python<'py>, name: &str, gap_steps: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let probe: Probe = name.parse().map_err(to_py_err)?;
    let mut cfg = ProbeConfig::default();
    if let Some(s) = gap_steps {
        cfg.gap.steps = s;
    }
    let report = py.detach(|| theory::run(probe, &cfg)).map_err(to_py_err)?;
    let value = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// The square canonical operators as `(case, matrix)` pairs.
#[pyfunction]
fn canonical_operators() -> PyResult<Vec<(&'static str, Rows)>> {
    let suite = square_suite().map_err(to_py_err)?;
    Ok(suite.iter().map(|op| (op.case_label.tag(), rows(&op.matrix))).collect())
}

/// Worst-case error of the constructive realization of each square
/// canonical operator over `trials` random value vectors.
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0))]
fn realization_errors(trials: usize, seed: u64) -> PyResult<Vec<f64>> {
    let suite = square_suite().map_err(to_py_err)?;
    suite
        .iter()
        .map(|op| {
            let r = realize_with_toa(op).map_err(to_py_err)?;
            let err = realization_error(op, &r, trials, seed).map_err(to_py_err)?;
            Ok(err.unwrap_or(f64::NAN))
        })
        .collect()
}

/// Inverted drop of an offset matrix at rate `p` with mask seed `seed`.
#[pyfunction]
fn sor_apply(m: Rows, p: f64, seed: u64) -> PyResult<Rows> {
    let m = matrix(m)?;
    let mut state = SorState::new(SorConfig {
        seed,
        ..SorConfig::default()
    });
    let mask = state.sample_mask_with_rate(p, m.rows(), m.cols());
    Ok(rows(&toa_core::sor::apply(&m, p, &mask).map_err(to_py_err)?))
}

#[pymodule]
fn toa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VARIANTS", ToaVariant::ALL.map(ToaVariant::name).to_vec())?;
    m.add_class::<PyHead>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_probe, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_operators, m)?)?;
    m.add_function(wrap_pyfunction!(realization_errors, m)?)?;
    m.add_function(wrap_pyfunction!(sor_apply, m)?)?;
    Ok(())
}
