//! Python bindings. Structured values cross the boundary as JSON strings
//! with the same layout as the command-line configuration files.

use std::path::PathBuf;

use ads_core::data::{generate, write_dataset, SampleRecord, SynthSpec};
use ads_core::metrics;
use ads_core::ranker::{count_params_flops, load_checkpoint, ModelConfig, Ranker as CoreRanker};
use ads_core::{AdsError, ParameterStore};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: AdsError) -> PyErr {
    match e {
        AdsError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Rank-sum AUC with ties counted as half a win.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(py_err)
}

/// Relative AUC improvement over a baseline, in percent.
#[pyfunction]
fn relative_improvement(measured: f64, baseline: f64) -> PyResult<f64> {
    metrics::relative_improvement(measured, baseline).map_err(py_err)
}

/// Parameter and forward FLOP counts of a model config, as JSON.
#[pyfunction]
fn cost(model_json: &str) -> PyResult<String> {
    let cfg: ModelConfig = parse("model", model_json)?;
    to_json(&count_params_flops(&cfg).map_err(py_err)?)
}

/// The small model config used by gradient checks, as JSON.
#[pyfunction]
fn tiny_config() -> PyResult<String> {
    to_json(&ModelConfig::tiny())
}

/// Generates a synthetic dataset into `out_dir`; returns the manifest JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json = "{}"))]
fn generate_synthetic(out_dir: PathBuf, spec_json: &str) -> PyResult<String> {
    let spec: SynthSpec = parse("spec", spec_json)?;
    let ds = generate(&spec).map_err(py_err)?;
    write_dataset(&out_dir, &ds).map_err(py_err)?;
    to_json(&ds.manifest)
}

/// A model with its parameters.
#[pyclass]
struct Ranker {
    inner: CoreRanker,
    store: ParameterStore,
}

#[pymethods]
impl Ranker {
    /// Freshly initialized model from a config JSON.
    #[new]
    fn new(model_json: &str) -> PyResult<Self> {
        let cfg: ModelConfig = parse("model", model_json)?;
        let inner = CoreRanker::new(cfg).map_err(py_err)?;
        let store = inner.init_params().map_err(py_err)?;
        Ok(Self { inner, store })
    }

    /// Model restored from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        let inner = CoreRanker::new(ck.model).map_err(py_err)?;
        Ok(Self { inner, store: ck.store })
    }

    fn config(&self) -> PyResult<String> {
        to_json(self.inner.config())
    }

    fn fingerprint(&self) -> String {
        self.inner.config().fingerprint()
    }

    /// Click probabilities for a JSON list of sample records.
    fn predict(&self, records_json: &str) -> PyResult<Vec<f64>> {
        let records: Vec<SampleRecord> = parse("records", records_json)?;
        self.inner.predict(&self.store, &records).map_err(py_err)
    }
}

#[pymodule]
fn ads_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(tiny_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_class::<Ranker>()?;
    Ok(())
}
