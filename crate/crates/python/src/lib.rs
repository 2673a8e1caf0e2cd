//! Python bindings: volumes, preprocessing, phantoms, configs, metrics and
//! trained-model inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use vl3d::config::RunConfig;
use vl3d::metrics::{self, Diagnosis};
use vl3d::phantom::{self, PhantomOptions};
use vl3d::pipeline::{self, Dataset, EvalTask, Vlm};
use vl3d::rng::RngHandle;
use vl3d::tensor::ParamStore;
use vl3d::volume;

fn py_err(e: vl3d::Error) -> PyErr {
    match e {
        vl3d::Error::Config(_) | vl3d::Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        vl3d::Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

/// Parses JSON text into Python objects.
fn json_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load_config(preset: &str, config: Option<PathBuf>) -> PyResult<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::preset(preset),
    }
    .map_err(py_err)
}

/// A CT volume in Hounsfield units, x fastest.
#[pyclass(name = "Volume", module = "vl3d", frozen)]
struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<i16>) -> PyResult<Self> {
        Ok(Self { inner: volume::Volume::new(dims, spacing, voxels).map_err(py_err)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: volume::read_rvol(path).map_err(py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        volume::write_rvol(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing()
    }

    fn voxels(&self) -> Vec<i16> {
        self.inner.voxels().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<i16> {
        let d = self.inner.dims();
        if x >= d[0] || y >= d[1] || z >= d[2] {
            return Err(PyValueError::new_err(format!("({x}, {y}, {z}) outside {d:?}")));
        }
        Ok(self.inner.get(x, y, z))
    }

    /// Resample, window and crop/pad with a preset's settings; returns
    /// `(dims, values)` with values in [0, 1], x fastest.
    #[pyo3(signature = (preset = "toy", config = None))]
    fn preprocess(&self, preset: &str, config: Option<PathBuf>) -> PyResult<([usize; 3], Vec<f32>)> {
        let cfg = load_config(preset, config)?;
        let g = volume::preprocess(&self.inner, &cfg.preprocess).map_err(py_err)?.to_f32();
        Ok((g.dims, g.values))
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

/// One phantom and its ground-truth findings (as a dict).
#[pyfunction]
#[pyo3(signature = (seed, dims = [48, 48, 24], spacing = [2.0, 2.0, 4.0], noise_sigma = phantom::NOISE_SIGMA_HU))]
fn gen_phantom<'py>(
    py: Python<'py>,
    seed: u64,
    dims: [usize; 3],
    spacing: [f32; 3],
    noise_sigma: f64,
) -> PyResult<(PyVolume, Bound<'py, PyAny>)> {
    let opts = PhantomOptions { dims, spacing, noise_sigma };
    let (v, f) = phantom::gen_phantom(&mut RngHandle::new(seed), &phantom::patient_id(0), &opts).map_err(py_err)?;
    Ok((PyVolume { inner: v }, json_to_py(py, &f)?))
}

/// Writes a phantom dataset directory; returns the manifest.
#[pyfunction]
#[pyo3(signature = (out, n, seed, dims = [48, 48, 24], spacing = [2.0, 2.0, 4.0], test_fraction = 0.1))]
fn gen_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    n: usize,
    seed: u64,
    dims: [usize; 3],
    spacing: [f32; 3],
    test_fraction: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = PhantomOptions { dims, spacing, ..PhantomOptions::default() };
    let m = py.detach(|| phantom::gen_dataset(out, n, seed, &opts, test_fraction)).map_err(py_err)?;
    json_to_py(py, &m)
}

/// Resolved run config as a dict.
#[pyfunction]
#[pyo3(signature = (preset = "toy", config = None))]
fn run_config<'py>(py: Python<'py>, preset: &str, config: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &load_config(preset, config)?)
}

/// Weights-free token ledger of a config.
#[pyfunction]
#[pyo3(signature = (preset = "toy", config = None))]
fn shape_ledger<'py>(py: Python<'py>, preset: &str, config: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(preset, config)?;
    json_to_py(py, &pipeline::shape_ledger(&cfg).map_err(py_err)?)
}

#[pyfunction]
fn bleu1(candidate: &str, reference: &str) -> f64 {
    metrics::bleu1(candidate, reference)
}

#[pyfunction]
fn rouge1(candidate: &str, reference: &str) -> f64 {
    metrics::rouge1(candidate, reference)
}

#[pyfunction]
fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    metrics::meteor_exact(candidate, reference)
}

#[pyfunction]
fn token_f1(candidate: &str, reference: &str) -> f64 {
    metrics::token_f1(candidate, reference)
}

/// "positive", "negative" or "unknown".
#[pyfunction]
fn parse_diagnosis_answer(answer: &str) -> &'static str {
    match metrics::parse_diagnosis_answer(answer) {
        Diagnosis::Positive => "positive",
        Diagnosis::Negative => "negative",
        Diagnosis::Unknown => "unknown",
    }
}

/// BACC, precision, recall, F1 and counts from answers and labels.
#[pyfunction]
fn classification_metrics<'py>(py: Python<'py>, answers: Vec<String>, labels: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    let preds: Vec<Diagnosis> = answers.iter().map(|a| metrics::parse_diagnosis_answer(a)).collect();
    json_to_py(py, &metrics::classification_metrics(&preds, &labels).map_err(py_err)?)
}

/// A fine-tuned checkpoint loaded for inference.
#[pyclass(name = "Model", module = "vl3d", frozen)]
struct PyModel {
    cfg: RunConfig,
    vlm: Vlm,
    store: ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (checkpoint, preset = "toy", config = None))]
    fn new(checkpoint: PathBuf, preset: &str, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = load_config(preset, config)?;
        let (vlm, store) = pipeline::load_model(&cfg, &checkpoint).map_err(py_err)?;
        Ok(Self { cfg, vlm, store })
    }

    /// Greedy answer to `prompt` about the RVOL file at `volume`.
    fn generate(&self, py: Python<'_>, volume: PathBuf, prompt: &str) -> PyResult<String> {
        py.detach(|| pipeline::generate(&self.cfg, &self.vlm, &self.store, &volume, prompt)).map_err(py_err)
    }

    /// Scores the held-out split of a dataset; returns the report dict.
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, task: &str) -> PyResult<Bound<'py, PyAny>> {
        let task = EvalTask::parse(task).map_err(py_err)?;
        let report = py
            .detach(|| Dataset::open(&data).and_then(|d| pipeline::evaluate(&self.cfg, &self.vlm, &self.store, &d, task)))
            .map_err(py_err)?;
        json_to_py(py, &report)
    }

    #[getter]
    fn perceiver(&self) -> String {
        self.vlm.perceiver.spec.kind.to_string()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vlm.vocab.len()
    }
}

#[pymodule]
#[pyo3(name = "vl3d")]
fn vl3d_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(shape_ledger, m)?)?;
    m.add_function(wrap_pyfunction!(bleu1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge1, m)?)?;
    m.add_function(wrap_pyfunction!(meteor_exact, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(parse_diagnosis_answer, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add("AIR_HU", volume::AIR_HU)?;
    Ok(())
}
