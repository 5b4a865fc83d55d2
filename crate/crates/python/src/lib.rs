//! Python bindings: sessions, run configs, models and metrics.
//!
//! Arrays cross the boundary as nested lists of floats; errors raise
//! `Eeg2FmriError` whose message starts with the error kind.

use std::path::PathBuf;

use eeg2fmri::backend::Tensor;
use eeg2fmri::cli::{eval_reports, EvalMode};
use eeg2fmri::io::{self, RunConfig};
use eeg2fmri::model::ModelState;
use eeg2fmri::synth::{generate_session, Session};
use eeg2fmri::{metrics, pipeline};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(eeg2fmri_py, Eeg2FmriError, PyException);

fn err(e: eeg2fmri::Error) -> PyErr {
    Eeg2FmriError::new_err(format!("{}: {e}", e.kind()))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().unwrap_or(&0);
    if cols == 0 {
        return Vec::new();
    }
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Run configuration ([synth], [model], [train], [sampler], [regions]).
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::parse(text).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    /// The configuration the reproduction suite trains with.
    #[staticmethod]
    fn reproduction() -> Self {
        PyRunConfig {
            inner: eeg2fmri::repro::default_run_config(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.synth.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.synth.seed = seed;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.epochs = epochs;
    }

    #[getter]
    fn session_seconds(&self) -> f64 {
        self.inner.synth.session_seconds
    }

    #[setter]
    fn set_session_seconds(&mut self, s: f64) {
        self.inner.synth.session_seconds = s;
    }

    #[getter]
    fn sampler_steps(&self) -> usize {
        self.inner.sampler.steps
    }

    #[setter]
    fn set_sampler_steps(&mut self, steps: usize) {
        self.inner.sampler.steps = steps;
    }
}

/// A paired EEG/fMRI session.
#[pyclass(name = "Session")]
pub struct PySession {
    inner: Session,
}

#[pymethods]
impl PySession {
    /// Generates a synthetic session from the config's [synth] section.
    #[staticmethod]
    fn generate(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PySession {
            inner: generate_session(&config.inner.synth).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySession {
            inner: io::load_session(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_session(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels()
    }

    #[getter]
    fn tr_seconds(&self) -> f64 {
        self.inner.tr_seconds
    }

    #[getter]
    fn split_frame(&self) -> usize {
        self.inner.split_frame
    }

    /// EEG as `[channels][samples]`.
    fn eeg(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.eeg)
    }

    /// fMRI as `[frames][vertices]`.
    fn fmri(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.fmri)
    }
}

/// Trained (or freshly initialised) model.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Untrained model sized for `session`.
    #[staticmethod]
    fn init(config: &PyRunConfig, session: &PySession) -> PyResult<Self> {
        let cfg = pipeline::model_config(&config.inner, &session.inner).map_err(err)?;
        Ok(PyModel {
            inner: ModelState::init(cfg, config.inner.train.seed).map_err(err)?,
        })
    }

    /// Trains on the session's training split. Returns the model and the
    /// per-epoch report as a JSON string.
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyRunConfig, session: &PySession) -> PyResult<(Self, String)> {
        let (model, report) = py
            .detach(|| pipeline::train_session(&config.inner, &session.inner, None))
            .map_err(err)?;
        let json = serde_json::to_string(&report).map_err(|e| Eeg2FmriError::new_err(e.to_string()))?;
        Ok((PyModel { inner: model }, json))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: io::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.config.latent_dim
    }

    #[getter]
    fn k_w(&self) -> usize {
        self.inner.config.k_w
    }

    /// EEG-only reconstruction of every held-out window, each as
    /// `[frames][vertices]`.
    fn reconstruct(&self, py: Python<'_>, config: &PyRunConfig, session: &PySession) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let preds = py
            .detach(|| {
                let windows = pipeline::test_windows(&config.inner, &session.inner, &self.inner)?;
                pipeline::translate_windows(&self.inner, &windows, &config.inner.sampler)
            })
            .map_err(err)?;
        Ok(preds.iter().map(|p| rows(p.frames())).collect())
    }

    /// Held-out scores as a JSON list of reports. `mode` is "translation"
    /// or "interrecon".
    #[pyo3(signature = (config, session, mode = "translation", regions = None, deltas = vec![1, 2, 3, 4]))]
    fn evaluate(
        &self,
        py: Python<'_>,
        config: &PyRunConfig,
        session: &PySession,
        mode: &str,
        regions: Option<Vec<String>>,
        deltas: Vec<usize>,
    ) -> PyResult<String> {
        let mode = match mode {
            "translation" => EvalMode::Translation,
            "interrecon" => EvalMode::Interrecon,
            other => return Err(Eeg2FmriError::new_err(format!("config: unknown mode {other:?}"))),
        };
        let reports = py
            .detach(|| eval_reports(&config.inner, &session.inner, &self.inner, mode, regions.as_deref(), &deltas))
            .map_err(err)?;
        serde_json::to_string(&reports).map_err(|e| Eeg2FmriError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn pearson_r(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::pearson_r(&pred, &truth).map_err(err)
}

#[pyfunction]
fn cosine_sim(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_sim(&pred, &truth).map_err(err)
}

#[pyfunction]
fn mse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::mse_slices(&pred, &truth).map_err(err)
}

#[pymodule]
fn eeg2fmri_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Eeg2FmriError", m.py().get_type::<Eeg2FmriError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    Ok(())
}
