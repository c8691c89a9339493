//! Python bindings for the forecaster: synthesis, patching, calibration,
//! training, prediction, and evaluation, driven by the same JSON configs the
//! CLI accepts.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use timesqueeze::error::Error;
use timesqueeze::forecaster::{self, LossConfig, ModelConfig};
use timesqueeze::params::ParamStore;
use timesqueeze::patcher::{self, PatchConfig};
use timesqueeze::series::{self, standardize, SynthSpec, TimeSeries, WindowSpec};
use timesqueeze::trainer::{self, TrainConfig};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Data(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

/// Generate a synthetic series. `kind` is one of "sine_noise",
/// "piecewise_bursty", or "ar1"; `params_json` overrides generator defaults.
#[pyfunction]
#[pyo3(signature = (kind, length, seed=0, params_json=None))]
fn synth(kind: &str, length: usize, seed: u64, params_json: Option<&str>) -> PyResult<Vec<f64>> {
    let params = match params_json {
        None => serde_json::Value::Null,
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
    };
    let spec: SynthSpec = series::synth_spec_from_json(kind, &params).map_err(to_py)?;
    Ok(series::synth(&spec, length, seed).map_err(to_py)?.values)
}

/// Boundary detection on a raw sequence; returns (boundaries, sizes).
#[pyfunction]
#[pyo3(signature = (values, patch_json=None))]
fn detect_boundaries(values: Vec<f64>, patch_json: Option<&str>) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let cfg: PatchConfig = parse_json(patch_json)?;
    cfg.validate().map_err(to_py)?;
    let plan = patcher::detect_boundaries(&values, &cfg).map_err(to_py)?;
    Ok((plan.boundaries, plan.sizes))
}

/// Bisect the deviation threshold until the corpus compresses at the target
/// mean ratio. Returns {"tau", "achieved_ratio", "iterations", "target_ratio"}.
#[pyfunction]
#[pyo3(signature = (corpus, target_ratio, patch_json=None))]
fn calibrate_tau<'py>(
    py: Python<'py>,
    corpus: Vec<Vec<f64>>,
    target_ratio: f64,
    patch_json: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: PatchConfig = parse_json(patch_json)?;
    cfg.validate().map_err(to_py)?;
    let cal = patcher::calibrate_tau(&corpus, target_ratio, &cfg).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("tau", cal.tau)?;
    out.set_item("achieved_ratio", cal.achieved_ratio)?;
    out.set_item("iterations", cal.iterations)?;
    out.set_item("target_ratio", cal.target_ratio)?;
    Ok(out)
}

/// Huber penalty of a single error.
#[pyfunction]
#[pyo3(signature = (e, delta=1.0))]
fn huber(e: f64, delta: f64) -> f64 {
    forecaster::huber(e, delta)
}

/// Greedy emission plan for a requested horizon; returns [(head, emit), ...].
#[pyfunction]
fn schedule_horizons(requested: usize, heads: Vec<usize>) -> PyResult<Vec<(usize, usize)>> {
    forecaster::schedule_horizons(requested, &heads).map_err(to_py)
}

/// A model instance: configuration plus parameters.
#[pyclass]
struct Forecaster {
    model: ModelConfig,
    loss: LossConfig,
    store: ParamStore,
}

#[pymethods]
impl Forecaster {
    /// Fresh seeded parameters. `model_json` overrides the default
    /// architecture; `loss_json` the loss settings.
    #[new]
    #[pyo3(signature = (model_json=None, loss_json=None, seed=0))]
    fn new(model_json: Option<&str>, loss_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let model: ModelConfig = parse_json(model_json)?;
        let loss: LossConfig = parse_json(loss_json)?;
        model.validate().map_err(to_py)?;
        loss.validate().map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = forecaster::init_params(&model, &mut rng);
        Ok(Forecaster { model, loss, store })
    }

    /// Train on sliding windows of one raw series, replacing the parameters
    /// with the result (initialization is re-seeded from the train config).
    /// Returns the loss curve as [(step, loss), ...].
    #[pyo3(signature = (values, context, horizon, stride=1, train_json=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        values: Vec<f64>,
        context: usize,
        horizon: usize,
        stride: usize,
        train_json: Option<&str>,
    ) -> PyResult<Vec<(usize, f64)>> {
        let cfg: TrainConfig = parse_json(train_json)?;
        let series = TimeSeries::new(values, "py").map_err(to_py)?;
        let spec = WindowSpec { context, horizon, stride };
        let windows = series::make_windows(&series, &spec).map_err(to_py)?;
        let (model, loss) = (self.model.clone(), self.loss);
        let outcome = py
            .detach(move || trainer::train(&windows, &model, &loss, &cfg, None, 1))
            .map_err(to_py)?;
        self.store = outcome.store;
        Ok(outcome.curve.into_iter().map(|l| (l.step, l.loss)).collect())
    }

    /// H-step forecast in raw units from a raw context.
    fn predict(&self, context: Vec<f64>, horizon: usize) -> PyResult<Vec<f64>> {
        forecaster::predict(&self.store, &self.model, &context, horizon).map_err(to_py)
    }

    /// Sliding-window metrics in standardized units; one dict per horizon.
    #[pyo3(signature = (values, context, horizons, stride=1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        values: Vec<f64>,
        context: usize,
        horizons: Vec<usize>,
        stride: usize,
    ) -> PyResult<Bound<'py, PyList>> {
        let series = TimeSeries::new(values, "py").map_err(to_py)?;
        let report =
            timesqueeze::report::evaluate(&self.store, &self.model, &series, context, stride, &horizons)
                .map_err(to_py)?;
        let out = PyList::empty(py);
        for m in &report.metrics {
            let row = PyDict::new(py);
            row.set_item("horizon", m.horizon)?;
            row.set_item("mse", m.mse)?;
            row.set_item("mae", m.mae)?;
            out.append(row)?;
        }
        Ok(out)
    }

    /// Patch plan the model would use for a standardized context; the input
    /// is z-scored exactly as the pipeline does before patching.
    fn patch_plan(&self, values: Vec<f64>) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let std = standardize(&values, &[]);
        let plan = patcher::detect_boundaries(&std.context, &self.model.patch).map_err(to_py)?;
        Ok((plan.boundaries, plan.sizes))
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.store, &self.model, &self.loss, dir.as_ref()).map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (store, model, loss) = trainer::load_checkpoint(dir.as_ref()).map_err(to_py)?;
        Ok(Forecaster { model, loss, store })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn num_coords(&self) -> usize {
        self.store.num_coords()
    }

    fn __repr__(&self) -> String {
        format!(
            "Forecaster(d_model={}, horizons={:?}, coords={})",
            self.model.d_model(),
            self.model.horizons,
            self.store.num_coords()
        )
    }
}

#[pymodule]
fn timesqueeze_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(detect_boundaries, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_tau, m)?)?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_horizons, m)?)?;
    m.add_class::<Forecaster>()?;
    Ok(())
}
