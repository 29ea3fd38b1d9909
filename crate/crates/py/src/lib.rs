//! Python bindings: configuration, baseline training, evaluation, the
//! closed-loop cycle and the property checks.

use std::path::PathBuf;

use csiloop_core::harness::checks::{self, GradcheckOptions};
use csiloop_core::harness::experiment::{self, LoopOutcome};
use csiloop_core::harness::ExperimentConfig;
use csiloop_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, predict_with_confidence,
    save_checkpoint, GruParameters,
};
use csiloop_core::numerics::{self, RealMatrix};
use csiloop_core::sim::ActivityClass;
use csiloop_core::sync::{pair_streams, SyncConfig};
use csiloop_core::teacher::TeacherLabel;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: csiloop_core::Error) -> PyErr {
    match e {
        csiloop_core::Error::Invalid(_) | csiloop_core::Error::InvalidLabel { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json(py, &text)
}

/// Experiment configuration. `overrides` are `key=value` strings as for
/// `csiloop --set`.
#[pyclass(name = "Config", module = "csiloop", from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::load(path.as_deref(), std::iter::empty(), &overrides)
            .map(Self)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// A copy with more overrides applied on top.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        self.0
            .with_overrides(&overrides)
            .map(Self)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.0.seeds.clone()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    fn __repr__(&self) -> String {
        format!("Config(seeds={:?}, shift={:?})", self.0.seeds, self.0.shift)
    }
}

/// Student weights.
#[pyclass(name = "Model", module = "csiloop", from_py_object)]
#[derive(Clone)]
struct PyModel(GruParameters);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        decode_checkpoint(data).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, &path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &encode_checkpoint(&self.0).map_err(err)?))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    /// Classifies one window given as rows of features. Returns
    /// `(activity, confidence, probabilities)`.
    fn predict(&self, window: Vec<Vec<f64>>) -> PyResult<(String, f64, Vec<f64>)> {
        let rows = window.len();
        let cols = window.first().map_or(0, Vec::len);
        if window.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("ragged window"));
        }
        let m = RealMatrix::new(rows, cols, window.into_iter().flatten().collect()).map_err(err)?;
        let p = predict_with_confidence(&self.0, &m).map_err(err)?;
        let name = p.activity().map_err(err)?.name().to_string();
        Ok((name, p.confidence, p.probabilities))
    }

    /// Accuracy on the held-out recording of `seed`.
    #[pyo3(signature = (config, seed, shifted=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        config: &PyConfig,
        seed: u64,
        shifted: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let table = py
            .detach(|| experiment::evaluate_on(&config.0, &self.0, seed, shifted))
            .map_err(err)?;
        to_py(py, &table)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

/// Trains a baseline for `seed`. Returns `(model, accuracy)`.
#[pyfunction]
fn train_baseline<'py>(
    py: Python<'py>,
    config: &PyConfig,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let run = py
        .detach(|| experiment::train_baseline(&config.0, seed))
        .map_err(err)?;
    Ok((PyModel(run.params), to_py(py, &run.table)?))
}

/// Applies the shift, runs one adaptation cycle and scores the node's final
/// weights. The returned dict holds the updated model under `"model"`.
#[pyfunction]
#[pyo3(signature = (config, baseline, seed, precision=1.0))]
fn run_closed_loop<'py>(
    py: Python<'py>,
    config: &PyConfig,
    baseline: &PyModel,
    seed: u64,
    precision: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let run = py
        .detach(|| experiment::run_closed_loop(&config.0, &baseline.0, seed, precision))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("seed", run.seed)?;
    d.set_item("precision", run.precision)?;
    d.set_item("shifted", to_py(py, &run.shifted)?)?;
    d.set_item("recovered", to_py(py, &run.recovered)?)?;
    d.set_item("outcome", to_py(py, &run.outcome)?)?;
    d.set_item(
        "completed",
        matches!(run.outcome, LoopOutcome::Completed { .. }),
    )?;
    d.set_item("events", to_py(py, &run.events)?)?;
    d.set_item("latency", to_py(py, &run.latency)?)?;
    d.set_item("teacher_calls_outside", run.teacher_calls_outside)?;
    d.set_item("teacher_calls_inside", run.teacher_calls_inside)?;
    d.set_item("model", PyModel(run.final_params))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (instances=10, seed=0, fault=None))]
fn gradcheck<'py>(
    py: Python<'py>,
    instances: usize,
    seed: u64,
    fault: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = GradcheckOptions {
        instances,
        seed,
        fault,
        ..Default::default()
    };
    let r = py.detach(|| checks::gradcheck(&opts));
    json(py, &r.to_json())
}

#[pyfunction]
#[pyo3(signature = (cases=100, seed=0))]
fn synccheck<'py>(py: Python<'py>, cases: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| checks::synccheck(cases, seed));
    json(py, &r.to_json())
}

#[pyfunction]
#[pyo3(signature = (cases=10_000, seed=0))]
fn protofuzz<'py>(py: Python<'py>, cases: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| checks::protofuzz(cases, seed));
    json(py, &r.to_json())
}

#[pyfunction]
fn softmax(values: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax(&values).map_err(err)
}

/// Nearest-label pairing. `labels` are `(timestamp_ns, activity)` tuples,
/// both streams sorted. Returns `(csi_index, label_index, delta_ns)` per
/// matched frame.
#[pyfunction]
#[pyo3(signature = (csi_ns, labels, epsilon_ns))]
fn pair(
    csi_ns: Vec<u64>,
    labels: Vec<(u64, String)>,
    epsilon_ns: u64,
) -> PyResult<Vec<(usize, usize, u64)>> {
    let labels = labels
        .into_iter()
        .map(|(t, name)| {
            let class: ActivityClass = name.parse().map_err(err)?;
            Ok(TeacherLabel {
                class,
                confidence: 1.0,
                timestamp_ns: t,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = SyncConfig {
        epsilon_ns,
        csi_capacity: csi_ns.len().next_power_of_two(),
        label_capacity: labels.len().next_power_of_two(),
        ..SyncConfig::default()
    };
    let p = pair_streams(&csi_ns, &labels, &cfg).map_err(err)?;
    Ok(p.pairs
        .into_iter()
        .map(|s| (s.csi_index, s.label_index, s.delta_ns))
        .collect())
}

#[pyfunction]
fn activities() -> Vec<&'static str> {
    ActivityClass::ALL.iter().map(|c| c.name()).collect()
}

#[pymodule]
fn csiloop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(run_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synccheck, m)?)?;
    m.add_function(wrap_pyfunction!(protofuzz, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(pair, m)?)?;
    m.add_function(wrap_pyfunction!(activities, m)?)?;
    m.add("ENV_PREFIX", csiloop_core::harness::ENV_PREFIX)?;
    Ok(())
}
