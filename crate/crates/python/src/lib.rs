//! Python bindings: environments, tabular policies, the loss identities and
//! config-driven training, with errors raised as `McpoError`.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use mcpo::cli::ExperimentConfig;
use mcpo::env::EnvSpec;
use mcpo::losses::{dpo_loss, rnce_loss, LossEval};
use mcpo::policy::ImplicitReward;
use mcpo::training::{generate_dataset_with, read_jsonl, train_offline, train_online, write_jsonl};

create_exception!(mcpo_py, McpoError, PyException);
create_exception!(mcpo_py, DivergenceError, McpoError);

fn to_py(e: mcpo::Error) -> PyErr {
    match e {
        mcpo::Error::DivergenceDetected { .. } => DivergenceError::new_err(e.to_string()),
        other => McpoError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    McpoError::new_err(e.to_string())
}

#[pyclass(name = "Environment", frozen)]
struct PyEnvironment {
    inner: mcpo::env::Environment,
}

#[pymethods]
impl PyEnvironment {
    /// Builds an environment from its JSON description.
    #[new]
    fn new(spec_json: &str) -> PyResult<Self> {
        let spec: EnvSpec = serde_json::from_str(spec_json).map_err(json_err)?;
        Ok(Self {
            inner: mcpo::env::Environment::new(spec).map_err(to_py)?,
        })
    }

    #[getter]
    fn prompt_count(&self) -> usize {
        self.inner.prompt_count()
    }

    #[getter]
    fn completion_count(&self) -> usize {
        self.inner.completion_count()
    }

    fn completions(&self) -> Vec<Vec<u32>> {
        self.inner.completions().iter().cloned().collect()
    }

    fn true_reward(&self, x: usize, y: usize) -> PyResult<f64> {
        self.inner.true_reward(x, y).map_err(to_py)
    }

    fn content_hash(&self) -> String {
        self.inner.spec().content_hash()
    }

    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.spec()).map_err(json_err)
    }
}

#[pyclass(name = "TabularPolicy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: mcpo::policy::TabularPolicy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    fn new(rows: usize, cols: usize, logits: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: mcpo::policy::TabularPolicy::from_logits(rows, cols, logits).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            inner: mcpo::policy::TabularPolicy::uniform(rows, cols),
        }
    }

    #[staticmethod]
    fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        Self {
            inner: mcpo::policy::TabularPolicy::random(rows, cols, scale, seed),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mcpo::policy::TabularPolicy::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits().to_vec()
    }

    fn logp(&self, x: usize, y: usize) -> PyResult<f64> {
        self.inner.logp(x, y).map_err(to_py)
    }

    fn row_probs(&self, x: usize) -> Vec<f64> {
        self.inner.row_probs(x)
    }
}

fn eval_tuple(e: LossEval) -> (f64, Vec<f64>) {
    (e.value, e.grad.values)
}

/// `π* ∝ π_ref exp(r / β)`.
#[pyfunction]
fn optimal_policy(env: &PyEnvironment, reference: &PyPolicy, beta: f64) -> PyResult<PyPolicy> {
    Ok(PyPolicy {
        inner: mcpo::env::optimal_policy(&env.inner, &reference.inner, beta).map_err(to_py)?,
    })
}

#[pyfunction]
fn kl_to_pistar(env: &PyEnvironment, policy: &PyPolicy, reference: &PyPolicy, beta: f64) -> PyResult<f64> {
    mcpo::eval::kl_to_pistar(&env.inner, &policy.inner, &reference.inner, beta).map_err(to_py)
}

#[pyfunction]
fn expected_reward(env: &PyEnvironment, policy: &PyPolicy) -> PyResult<f64> {
    mcpo::env::expected_reward(&env.inner, &policy.inner).map_err(to_py)
}

/// Ranking-NCE loss and its flattened gradient.
#[pyfunction]
fn rnce(
    target: &PyPolicy,
    reference: &PyPolicy,
    x: usize,
    y0: usize,
    negatives: Vec<usize>,
    beta: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let ir = ImplicitReward::new(&target.inner, &reference.inner).map_err(to_py)?;
    rnce_loss(&ir, x, y0, &negatives, beta).map(eval_tuple).map_err(to_py)
}

#[pyfunction]
fn dpo(target: &PyPolicy, reference: &PyPolicy, x: usize, y0: usize, y1: usize, beta: f64) -> PyResult<(f64, Vec<f64>)> {
    let ir = ImplicitReward::new(&target.inner, &reference.inner).map_err(to_py)?;
    dpo_loss(&ir, x, y0, y1, beta).map(eval_tuple).map_err(to_py)
}

#[pyfunction]
fn adjusted_winrate(n_cand: u64, n_base: u64, n_tie: u64) -> PyResult<f64> {
    mcpo::eval::adjusted_winrate(&mcpo::eval::MatchResult { n_cand, n_base, n_tie }).map_err(to_py)
}

/// The standard experiment config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::standard()).map_err(json_err)
}

fn parse_config(config_json: &str) -> PyResult<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(json_err)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Generates the configured dataset and returns it as JSON lines.
#[pyfunction]
fn generate_dataset(config_json: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let f = cfg.fixture().map_err(to_py)?;
    let d = &cfg.dataset;
    let records = generate_dataset_with(&f.env, &f.proposal, d.candidates, d.n_records, d.noise, d.judge, d.seed)
        .map_err(to_py)?;
    let mut buf = Vec::new();
    write_jsonl(&records, &mut buf).map_err(to_py)?;
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

/// Trains per the config; offline runs need `dataset_jsonl`. Returns the
/// final policy and the trace rows as
/// `(step, loss, grad_norm, exact_nll, kl_to_pistar, expected_reward)`.
#[pyfunction]
#[pyo3(signature = (config_json, dataset_jsonl=None))]
#[allow(clippy::type_complexity)]
fn train(
    py: Python<'_>,
    config_json: &str,
    dataset_jsonl: Option<&str>,
) -> PyResult<(PyPolicy, Vec<(usize, f64, f64, f64, f64, f64)>)> {
    let cfg = parse_config(config_json)?;
    let data = match dataset_jsonl {
        Some(text) => read_jsonl(text.as_bytes()).map_err(to_py)?,
        None => Vec::new(),
    };
    let (policy, trace) = py
        .detach(|| {
            let f = cfg.fixture()?;
            if cfg.train.online {
                train_online(f.context(), &cfg.train)
            } else {
                train_offline(f.context(), &data, &cfg.train)
            }
        })
        .map_err(to_py)?;
    let rows = trace
        .rows
        .iter()
        .map(|r| (r.step, r.loss, r.grad_norm, r.exact_nll, r.kl_to_pistar, r.expected_reward))
        .collect();
    Ok((PyPolicy { inner: policy }, rows))
}

/// Runs the identity checks for the config; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, corrupt_gradient=false))]
fn verify(py: Python<'_>, config_json: &str, corrupt_gradient: bool) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let report = py
        .detach(|| {
            let f = cfg.fixture()?;
            mcpo::verify::run_checks(&f.env, &f.reference, &f.proposal, &cfg.verify, corrupt_gradient)
        })
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn mcpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("McpoError", m.py().get_type::<McpoError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_pistar, m)?)?;
    m.add_function(wrap_pyfunction!(expected_reward, m)?)?;
    m.add_function(wrap_pyfunction!(rnce, m)?)?;
    m.add_function(wrap_pyfunction!(dpo, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_winrate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
