//! Python bindings: moments, portfolio solver, count model and risky-chain planning.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pbs_core::decode::{plan_action, DecoderConfig, MpcController, Strategy};
use pbs_core::env::{generate_dataset, rollout, RiskyChainSpec};
use pbs_core::eval::{self, MomentLedger, StepMoments};
use pbs_core::model::{self as core_model, CategoricalOverBins, SequenceModel};
use pbs_core::portfolio::{self, PortfolioProblem, RegularizationMode, SolveOptions};
use pbs_core::tokens::{self, BinCounts, Episode, Token};

fn py_err(e: pbs_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn ledger(steps: Vec<(f64, f64, f64, f64)>) -> PyResult<MomentLedger> {
    MomentLedger::from_steps(
        steps
            .into_iter()
            .map(|(reward_mean, reward_var, rtg_mean, rtg_var)| StepMoments {
                reward_mean,
                reward_var,
                rtg_mean,
                rtg_var,
            })
            .collect(),
    )
    .map_err(py_err)
}

/// Mean and variance of a categorical distribution over bin values.
#[pyfunction]
fn dist_moments(probs: Vec<f64>, values: Vec<f64>) -> PyResult<(f64, f64)> {
    let dist = CategoricalOverBins::new(probs, values).map_err(py_err)?;
    Ok(eval::dist_moments(&dist))
}

/// Discounted trajectory mean from `(reward_mean, reward_var, rtg_mean, rtg_var)` steps.
#[pyfunction]
fn trajectory_mean(steps: Vec<(f64, f64, f64, f64)>, gamma: f64) -> PyResult<f64> {
    eval::trajectory_mean(&ledger(steps)?, gamma).map_err(py_err)
}

#[pyfunction]
fn trajectory_variance(steps: Vec<(f64, f64, f64, f64)>, gamma: f64) -> PyResult<f64> {
    eval::trajectory_variance(&ledger(steps)?, gamma).map_err(py_err)
}

#[pyfunction]
fn smc_similarity(a: Vec<Token>, b: Vec<Token>) -> PyResult<f64> {
    eval::smc_similarity(&a, &b).map_err(py_err)
}

/// `diag(sigma) . S . diag(sigma)`.
#[pyfunction]
fn assemble_covariance(sigma: Vec<f64>, similarity: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let cov = eval::assemble_covariance(&DVector::from_vec(sigma), &matrix(similarity)?).map_err(py_err)?;
    Ok(rows(&cov))
}

#[pyfunction]
fn project_to_simplex(v: Vec<f64>) -> Vec<f64> {
    portfolio::project_to_simplex(&DVector::from_vec(v)).as_slice().to_vec()
}

fn problem(mu: Vec<f64>, cov: Vec<Vec<f64>>, delta: f64, alpha: f64, mode: &str) -> PyResult<PortfolioProblem> {
    let mode: RegularizationMode = mode.parse().map_err(py_err)?;
    PortfolioProblem::new(DVector::from_vec(mu), matrix(cov)?, delta, alpha, mode).map_err(py_err)
}

fn solution_dict<'py>(py: Python<'py>, s: &portfolio::PortfolioSolution) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("weights", s.weights.as_slice().to_vec())?;
    d.set_item("objective", s.objective)?;
    d.set_item("iterations", s.iterations)?;
    d.set_item("converged", s.converged)?;
    d.set_item("nonconcave", s.nonconcave)?;
    Ok(d)
}

/// Maximize `w.mu - delta w'Cw + sign * alpha w'w` over the simplex.
#[pyfunction]
#[pyo3(signature = (mu, cov, delta=1.0, alpha=0.1, mode="spread", tol=1e-10, max_iters=20000))]
fn solve_portfolio<'py>(
    py: Python<'py>,
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
    delta: f64,
    alpha: f64,
    mode: &str,
    tol: f64,
    max_iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let p = problem(mu, cov, delta, alpha, mode)?;
    let s = portfolio::solve_portfolio(
        &p,
        SolveOptions {
            tol,
            max_iters,
            trace: false,
        },
    )
    .map_err(py_err)?;
    solution_dict(py, &s)
}

/// Exhaustive simplex grid search; `N <= 4`.
#[pyfunction]
#[pyo3(signature = (mu, cov, delta=1.0, alpha=0.1, mode="spread", step=0.01))]
fn grid_oracle<'py>(
    py: Python<'py>,
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
    delta: f64,
    alpha: f64,
    mode: &str,
    step: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = problem(mu, cov, delta, alpha, mode)?;
    let s = portfolio::grid_oracle(&p, step).map_err(py_err)?;
    solution_dict(py, &s)
}

#[pyfunction]
fn annotate_rtg(rewards: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    tokens::annotate_rtg(&rewards, gamma).map_err(py_err)
}

#[allow(clippy::too_many_arguments)]
fn decoder(
    strategy: &str,
    beam_width: usize,
    horizon: usize,
    expansion_factor: usize,
    gamma: f64,
    delta: f64,
    alpha: f64,
    temperature: f64,
    seed: u64,
) -> PyResult<DecoderConfig> {
    let config = DecoderConfig {
        beam_width,
        horizon,
        expansion_factor,
        gamma,
        delta,
        alpha,
        temperature,
        strategy: strategy.parse::<Strategy>().map_err(py_err)?,
        seed,
        ..DecoderConfig::paper_default()
    };
    config.validate().map_err(py_err)?;
    Ok(config)
}

/// Episodes as plain dicts with `states`, `actions` and `rewards`.
type PyEpisode = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>);

fn to_episodes(episodes: Vec<PyEpisode>) -> Vec<Episode> {
    episodes
        .into_iter()
        .map(|(states, actions, rewards)| Episode {
            states,
            actions,
            rewards,
        })
        .collect()
}

/// Laplace-smoothed count model over discretized trajectory tokens.
#[pyclass(module = "pbs")]
struct CountModel {
    inner: core_model::CountModel,
}

#[pymethods]
impl CountModel {
    /// Fit the discretizer and the count tables on `(states, actions, rewards)` episodes.
    #[staticmethod]
    #[pyo3(signature = (episodes, bins=16, gamma=0.99, window=None, lambda_=1.0, action_bins=None))]
    fn train(
        episodes: Vec<PyEpisode>,
        bins: u32,
        gamma: f64,
        window: Option<usize>,
        lambda_: f64,
        action_bins: Option<u32>,
    ) -> PyResult<Self> {
        let episodes = to_episodes(episodes);
        let mut counts = BinCounts::uniform(bins);
        if let Some(a) = action_bins {
            counts.action = a;
        }
        let spec = tokens::fit_discretizer(&episodes, counts, gamma).map_err(py_err)?;
        let dataset = episodes
            .iter()
            .map(|e| tokens::tokenize_episode(&e.annotate(gamma)?, &spec))
            .collect::<pbs_core::Result<Vec<_>>>()
            .map_err(py_err)?;
        let window = window.unwrap_or(spec.transition_len());
        let inner = core_model::train_count_model(&dataset, &spec, window, lambda_).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: core_model::CountModel::load(std::path::Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn transition_len(&self) -> usize {
        self.inner.spec().transition_len()
    }

    #[getter]
    fn context_window(&self) -> usize {
        self.inner.context_window()
    }

    #[getter]
    fn num_contexts(&self) -> usize {
        self.inner.num_contexts()
    }

    fn encode_state(&self, state: Vec<f64>) -> PyResult<Vec<Token>> {
        self.inner.spec().encode_state(&state).map_err(py_err)
    }

    /// `(probs, bin_values)` of the next token after `context`.
    #[pyo3(signature = (context, temperature=1.0))]
    fn next_token_dist(&self, context: Vec<Token>, temperature: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let d = self.inner.next_token_dist(&context, temperature).map_err(py_err)?;
        Ok((d.probs().to_vec(), d.values().to_vec()))
    }

    /// First action of the best plan from `state`.
    #[pyo3(signature = (state, strategy="pbs", beam_width=8, horizon=3, expansion_factor=2, gamma=0.99, delta=1.0, alpha=0.1, temperature=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn plan(
        &self,
        state: Vec<f64>,
        strategy: &str,
        beam_width: usize,
        horizon: usize,
        expansion_factor: usize,
        gamma: f64,
        delta: f64,
        alpha: f64,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let config = decoder(strategy, beam_width, horizon, expansion_factor, gamma, delta, alpha, temperature, seed)?;
        let planned = plan_action(&self.inner, &[], &state, &config, false).map_err(py_err)?;
        Ok(planned.action)
    }
}

/// The two-corridor benchmark: a safe corridor and a risky one with a rare pit.
#[pyclass(module = "pbs")]
struct RiskyChain {
    inner: pbs_core::env::RiskyChain,
}

#[pymethods]
impl RiskyChain {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut spec = RiskyChainSpec::default();
        if let Some(kw) = kwargs {
            for (key, value) in kw.iter() {
                let key: String = key.extract()?;
                match key.as_str() {
                    "corridor_len" => spec.corridor_len = value.extract()?,
                    "r_safe" => spec.r_safe = value.extract()?,
                    "r_risky_high" => spec.r_risky_high = value.extract()?,
                    "r_risky_low" => spec.r_risky_low = value.extract()?,
                    "risky_high_prob" => spec.risky_high_prob = value.extract()?,
                    "catastrophe_prob" => spec.catastrophe_prob = value.extract()?,
                    "catastrophe_penalty" => spec.catastrophe_penalty = value.extract()?,
                    "data_coverage" => spec.data_coverage = value.extract()?,
                    other => return Err(PyValueError::new_err(format!("unknown parameter `{other}`"))),
                }
            }
        }
        Ok(Self {
            inner: spec.build().map_err(py_err)?,
        })
    }

    /// Behavior episodes as `(states, actions, rewards)` tuples.
    fn generate_dataset(&self, episodes: usize, seed: u64) -> PyResult<Vec<PyEpisode>> {
        let data = generate_dataset(&self.inner.mdp, &self.inner.behavior, episodes, seed).map_err(py_err)?;
        Ok(data.into_iter().map(|e| (e.states, e.actions, e.rewards)).collect())
    }

    /// Exact values of committing to corridor A and to corridor B.
    #[pyo3(signature = (gamma=1.0))]
    fn corridor_values(&self, gamma: f64) -> PyResult<(f64, f64)> {
        self.inner.corridor_values(gamma).map_err(py_err)
    }

    #[getter]
    fn start_state(&self) -> Vec<f64> {
        self.inner.mdp.state_features[pbs_core::env::RiskyChainLayout::START].clone()
    }

    /// Closed-loop returns of `model` over `seeds`, one per seed.
    #[pyo3(signature = (model, seeds, strategy="pbs", beam_width=8, horizon=3, expansion_factor=2, gamma=0.99, delta=1.0, alpha=0.1, temperature=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        model: &CountModel,
        seeds: Vec<u64>,
        strategy: &str,
        beam_width: usize,
        horizon: usize,
        expansion_factor: usize,
        gamma: f64,
        delta: f64,
        alpha: f64,
        temperature: f64,
    ) -> PyResult<Vec<f64>> {
        let config = decoder(strategy, beam_width, horizon, expansion_factor, gamma, delta, alpha, temperature, 0)?;
        let inner = &model.inner;
        let mdp = &self.inner.mdp;
        let outcomes = py
            .detach(|| rollout(mdp, |s| MpcController::new(inner, config, s), &seeds))
            .map_err(py_err)?;
        if let Some(failed) = outcomes.iter().find(|o| o.failed()) {
            return Err(PyValueError::new_err(format!(
                "seed {} failed: {}",
                failed.seed,
                failed.failure.as_deref().unwrap_or("")
            )));
        }
        Ok(outcomes.iter().map(|o| o.total_return).collect())
    }
}

#[pymodule]
fn pbs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dist_moments, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_mean, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_variance, m)?)?;
    m.add_function(wrap_pyfunction!(smc_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(solve_portfolio, m)?)?;
    m.add_function(wrap_pyfunction!(grid_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(annotate_rtg, m)?)?;
    m.add_class::<CountModel>()?;
    m.add_class::<RiskyChain>()?;
    Ok(())
}
