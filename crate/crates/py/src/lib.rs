//! Python bindings: flow utilities, environments, dataset generation, sweeps
//! and trained models. Structured values cross the boundary as JSON strings.

use std::path::PathBuf;

use laof_core::data::{generate_dataset as write_generated, split_action_ratio as split_ratio};
use laof_core::envs::{env_reset, env_step, render, scripted_expert, Action, EnvConfig, EnvState};
use laof_core::eval::aggregate_experiments;
use laof_core::experiment::{self, pool_width, read_table, RunConfig};
use laof_core::flow::{self, FlowField, RgbImage};
use laof_core::math::op_suite;
use laof_core::models::{head_suite, load_model, LamModel, Stage};
use laof_core::training::{composed_action, compute_lambda as lambda_of};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: laof_core::Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// An action from Python: an int for discrete control, a pair for continuous.
#[derive(FromPyObject)]
enum PyAction {
    Discrete(u8),
    Continuous((f32, f32)),
}

impl From<PyAction> for Action {
    fn from(a: PyAction) -> Self {
        match a {
            PyAction::Discrete(i) => Action::Discrete(i),
            PyAction::Continuous((dx, dy)) => Action::Continuous(dx, dy),
        }
    }
}

fn action_to_py(py: Python<'_>, a: Action) -> PyResult<Py<PyAny>> {
    Ok(match a {
        Action::Discrete(i) => i.into_pyobject(py)?.into_any().unbind(),
        Action::Continuous(dx, dy) => (dx, dy).into_pyobject(py)?.into_any().unbind(),
    })
}

fn env_config(config: Option<&str>) -> PyResult<EnvConfig> {
    let cfg = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => EnvConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn run_config(text: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(text).map_err(err)
}

/// RGB encoding of an interleaved `(u, v)` field.
#[pyfunction]
fn flow_to_rgb<'py>(py: Python<'py>, width: usize, height: usize, uv: Vec<f32>, sigma: f32) -> PyResult<Bound<'py, PyBytes>> {
    let f = FlowField::from_interleaved(width, height, &uv).map_err(err)?;
    let img = flow::flow_to_rgb(&f, sigma).map_err(err)?;
    Ok(PyBytes::new(py, &img.data))
}

/// Horn–Schunck flow between two RGB frames, interleaved `(u, v)`.
#[pyfunction]
#[pyo3(signature = (width, height, frame1, frame2, alpha = 1.0, iterations = 200))]
fn estimate_flow_hs(width: usize, height: usize, frame1: Vec<u8>, frame2: Vec<u8>, alpha: f32, iterations: usize) -> PyResult<Vec<f32>> {
    let a = RgbImage::from_raw(width, height, frame1).map_err(err)?;
    let b = RgbImage::from_raw(width, height, frame2).map_err(err)?;
    Ok(flow::estimate_flow_hs(&a, &b, alpha, iterations).map_err(err)?.interleaved())
}

#[pyfunction]
fn encode_flo<'py>(py: Python<'py>, width: usize, height: usize, uv: Vec<f32>) -> PyResult<Bound<'py, PyBytes>> {
    let f = FlowField::from_interleaved(width, height, &uv).map_err(err)?;
    Ok(PyBytes::new(py, &flow::encode_flo(&f).map_err(err)?))
}

/// `(width, height, uv)` from `.flo` bytes.
#[pyfunction]
fn decode_flo(data: Vec<u8>) -> PyResult<(usize, usize, Vec<f32>)> {
    let f = flow::decode_flo(&data).map_err(err)?;
    Ok((f.width, f.height, f.interleaved()))
}

#[pyfunction]
fn compute_lambda(n_unlabeled: usize, m_labeled: usize) -> PyResult<f64> {
    lambda_of(n_unlabeled, m_labeled).map_err(err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    laof_core::eval::pearson(&x, &y).map_err(err)
}

/// `(labeled, unlabeled)` ids of a train split.
#[pyfunction]
fn split_action_ratio(train: Vec<usize>, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    split_ratio(&train, ratio, seed).map_err(err)
}

/// `(name, cases, max_rel_err)` for every op and model head.
#[pyfunction]
#[pyo3(signature = (cases = 100, seed = 0))]
fn gradient_suite(py: Python<'_>, cases: usize, seed: u64) -> PyResult<Vec<(String, usize, f32)>> {
    py.detach(|| {
        let mut all = op_suite(cases, seed)?;
        all.extend(head_suite(cases, seed)?);
        Ok(all.into_iter().map(|e| (e.name, e.cases, e.max_rel_err)).collect())
    })
    .map_err(err)
}

/// Writes the dataset described by a run config; returns the manifest JSON.
#[pyfunction]
fn generate_dataset(py: Python<'_>, config: &str, out: PathBuf) -> PyResult<String> {
    let cfg = run_config(config)?;
    let spec = cfg.data.spec(&cfg.env, Stage::Pretrain);
    let manifest = py.detach(|| write_generated(&spec, &out)).map_err(err)?;
    serde_json::to_string(&manifest).map_err(json_err)
}

/// Pre-trains every cell of a run config; returns the table JSON.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run_sweep(py: Python<'_>, config: &str, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = run_config(config)?;
    let table = py
        .detach(|| {
            let features = cfg.features(Stage::Pretrain)?;
            let table = experiment::run_sweep(&cfg, &features, out.as_deref(), pool_width(cfg.workers))?;
            if let Some(dir) = &out {
                cfg.write_snapshot(Stage::Pretrain, dir)?;
                experiment::export_table(&table, dir)?;
            }
            Ok(table)
        })
        .map_err(err)?;
    serde_json::to_string(&table).map_err(json_err)
}

/// Per-cell mean, std and improvement over LAPO of a table JSON or a
/// `table.json` path.
#[pyfunction]
fn summarize(table: &str) -> PyResult<String> {
    let table = if table.trim_start().starts_with('{') {
        serde_json::from_str(table).map_err(json_err)?
    } else {
        read_table(std::path::Path::new(table)).map_err(err)?
    };
    serde_json::to_string(&aggregate_experiments(&table).map_err(err)?).map_err(json_err)
}

#[pyclass(module = "laof_lab")]
struct Env {
    state: EnvState,
}

#[pymethods]
impl Env {
    /// `config` is EnvConfig JSON; the default is the discrete grid.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = env_config(config)?;
        Ok(Self {
            state: env_reset(&cfg, seed).map_err(err)?,
        })
    }

    fn reset(&mut self, seed: u64) -> PyResult<()> {
        self.state = env_reset(&self.state.config, seed).map_err(err)?;
        Ok(())
    }

    /// Applies an action and reports whether the goal was reached.
    fn step(&mut self, action: PyAction) -> PyResult<bool> {
        let (next, reached) = env_step(&self.state, &action.into()).map_err(err)?;
        self.state = next;
        Ok(reached)
    }

    /// Current frame as packed RGB bytes.
    fn render<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &render(&self.state).data)
    }

    fn expert_action(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        action_to_py(py, scripted_expert(&self.state).map_err(err)?)
    }

    #[getter]
    fn agent(&self) -> (f32, f32) {
        self.state.agent
    }

    #[getter]
    fn goal(&self) -> Option<(f32, f32)> {
        self.state.goal
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.state.config.height, self.state.config.width)
    }

    #[getter]
    fn step_index(&self) -> u32 {
        self.state.step_index
    }
}

#[pyclass(module = "laof_lab")]
struct Model {
    model: LamModel,
    stages: Vec<Stage>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (model, stages) = load_model(dir).map_err(err)?;
        Ok(Self { model, stages })
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant.name().to_string()
    }

    #[getter]
    fn stages(&self) -> Vec<String> {
        self.stages.iter().map(|s| format!("{s:?}").to_lowercase()).collect()
    }

    /// Action of the composed policy in `env`'s current state.
    fn act(&self, py: Python<'_>, env: &Env) -> PyResult<Py<PyAny>> {
        action_to_py(py, composed_action(&self.model, &env.state).map_err(err)?)
    }

    /// Goal-reaching rate of the composed policy.
    #[pyo3(signature = (episodes = 1000, horizon = None, seed = 0, env = None))]
    fn rollout_success(&self, py: Python<'_>, episodes: usize, horizon: Option<usize>, seed: u64, env: Option<&str>) -> PyResult<f64> {
        let cfg = env_config(env)?;
        let r = experiment::RolloutConfig { episodes, horizon, seed };
        py.detach(|| r.success(&self.model, &cfg)).map_err(err)
    }
}

#[pymodule]
pub fn laof_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(flow_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flow_hs, m)?)?;
    m.add_function(wrap_pyfunction!(encode_flo, m)?)?;
    m.add_function(wrap_pyfunction!(decode_flo, m)?)?;
    m.add_function(wrap_pyfunction!(compute_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(split_action_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_class::<Env>()?;
    m.add_class::<Model>()?;
    Ok(())
}
