//! The pipeline stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pbs_core::decode::{plan_action, MpcController, StepTrace, Strategy};
use pbs_core::env::{generate_dataset, rollout, BehaviorPolicy, RiskyChain, TabularMdp};
use pbs_core::model::{mean_log_likelihood, train_count_model, uniform_log_likelihood, CountModel, SequenceModel};
use pbs_core::seeds::derive_seed;
use pbs_core::tokens::{fit_discretizer, read_episodes, tokenize_episode, write_episodes, DiscretizerSpec, Episode, Token, Trajectory};

use crate::config::{ExperimentConfig, BUILTIN_RISKY_CHAIN};
use crate::results::{plot_points, read_rows, summarize, write_plot_data, write_rows, ResultRow, RowKind};
use crate::ValidationError;

const HELDOUT_STREAM: u64 = 0x4845_4c44;

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn episodes(&self) -> PathBuf {
        self.dir.join("episodes.jsonl")
    }

    pub fn discretizer(&self) -> PathBuf {
        self.dir.join("discretizer.json")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn results(&self) -> PathBuf {
        self.dir.join("results.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    pub fn plot_data(&self) -> PathBuf {
        self.dir.join("plot_data.csv")
    }

    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.json")
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("cannot create {}", self.dir.display()))
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ValidationError(format!("{} not found; run `{produced_by}` first", path.display())).into())
    }
}

/// Ground-truth MDP plus the policy that collects the dataset.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: TabularMdp,
    pub behavior: BehaviorPolicy,
    pub chain: Option<RiskyChain>,
}

/// An MDP document may carry its own behavior policy; otherwise actions are uniform.
#[derive(Debug, Deserialize)]
struct EnvDocument {
    #[serde(flatten)]
    mdp: TabularMdp,
    #[serde(default)]
    behavior: Option<Vec<Vec<f64>>>,
}

impl Environment {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        if config.env == BUILTIN_RISKY_CHAIN {
            let chain = config.risky_chain.build()?;
            return Ok(Self {
                mdp: chain.mdp.clone(),
                behavior: chain.behavior.clone(),
                chain: Some(chain),
            });
        }
        let path = Path::new(&config.env);
        let text = fs::read_to_string(path).map_err(|e| ValidationError(format!("cannot read env spec {}: {e}", path.display())))?;
        let doc: EnvDocument =
            serde_json::from_str(&text).map_err(|e| ValidationError(format!("invalid env spec {}: {e}", path.display())))?;
        doc.mdp
            .validate()
            .map_err(|e| ValidationError(format!("invalid env spec {}: {e}", path.display())))?;
        let m = doc.mdp.n_actions();
        let table = doc
            .behavior
            .unwrap_or_else(|| vec![vec![1.0 / m as f64; m]; doc.mdp.n_states()]);
        let behavior = BehaviorPolicy::new(table).map_err(|e| ValidationError(format!("{}: {e}", path.display())))?;
        Ok(Self {
            mdp: doc.mdp,
            behavior,
            chain: None,
        })
    }

    /// Most likely start state, lowest id on ties.
    pub fn start_state(&self) -> Vec<f64> {
        let mut best = 0;
        for (s, p) in self.mdp.rho0.iter().enumerate() {
            if *p > self.mdp.rho0[best] {
                best = s;
            }
        }
        self.mdp.state_features[best].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub episodes: usize,
    pub transitions: usize,
    pub mean_return: f64,
    /// Fraction of episodes entering corridor B (risky chain only).
    pub risky_fraction: Option<f64>,
}

pub fn gen_data(config: &ExperimentConfig, paths: &Paths) -> Result<DataSummary> {
    let env = Environment::from_config(config)?;
    let gamma = config.decoder_config()?.gamma;
    paths.ensure()?;
    let episodes = generate_dataset(&env.mdp, &env.behavior, config.episodes, config.seed)?;
    let spec = fit_discretizer(&episodes, config.bins, gamma)?;
    write_episodes(&paths.episodes(), &episodes).with_context(|| format!("cannot write {}", paths.episodes().display()))?;
    spec.save(&paths.discretizer())
        .with_context(|| format!("cannot write {}", paths.discretizer().display()))?;
    let risky_fraction = env.chain.as_ref().map(|chain| {
        let entered = episodes
            .iter()
            .filter(|e| chain.mdp.nearest_action(&e.actions[0]).ok() == Some(1))
            .count();
        entered as f64 / episodes.len() as f64
    });
    Ok(DataSummary {
        episodes: episodes.len(),
        transitions: episodes.iter().map(Episode::len).sum(),
        mean_return: episodes.iter().map(|e| e.rewards.iter().sum::<f64>()).sum::<f64>() / episodes.len() as f64,
        risky_fraction,
    })
}

fn tokenize_all(episodes: &[Episode], spec: &DiscretizerSpec, gamma: f64) -> Result<Vec<Trajectory>> {
    Ok(episodes
        .iter()
        .map(|e| tokenize_episode(&e.annotate(gamma)?, spec))
        .collect::<pbs_core::Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub contexts: usize,
    pub window: usize,
    pub train_log_likelihood: f64,
    pub heldout_log_likelihood: f64,
    pub uniform_log_likelihood: f64,
}

/// Fresh behavior episodes, a quarter of the training count, for the held-out likelihood.
pub fn heldout_episodes(config: &ExperimentConfig, env: &Environment) -> Result<Vec<Episode>> {
    let count = (config.episodes / 4).max(1);
    Ok(generate_dataset(&env.mdp, &env.behavior, count, derive_seed(config.seed, &[HELDOUT_STREAM]))?)
}

pub fn train(config: &ExperimentConfig, paths: &Paths) -> Result<TrainSummary> {
    require(&paths.episodes(), "gen-data")?;
    require(&paths.discretizer(), "gen-data")?;
    let gamma = config.decoder_config()?.gamma;
    let spec = DiscretizerSpec::load(&paths.discretizer())?;
    let episodes = read_episodes(&paths.episodes())?;
    let dataset = tokenize_all(&episodes, &spec, gamma)?;
    let window = config.model.window.unwrap_or(spec.transition_len());
    let model = train_count_model(&dataset, &spec, window, config.model.lambda)?;
    model
        .save(&paths.model())
        .with_context(|| format!("cannot write {}", paths.model().display()))?;

    let env = Environment::from_config(config)?;
    let heldout = tokenize_all(&heldout_episodes(config, &env)?, &spec, gamma)?;
    Ok(TrainSummary {
        contexts: model.num_contexts(),
        window,
        train_log_likelihood: mean_log_likelihood(&model, &dataset)?,
        heldout_log_likelihood: mean_log_likelihood(&model, &heldout)?,
        uniform_log_likelihood: uniform_log_likelihood(&spec, &heldout)?,
    })
}

fn load_model(paths: &Paths) -> Result<CountModel> {
    require(&paths.model(), "train")?;
    CountModel::load(&paths.model()).with_context(|| format!("cannot load {}", paths.model().display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamEntry {
    pub tokens: Vec<Token>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub strategy: Strategy,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub action_tokens: Vec<Token>,
    pub beam: Vec<BeamEntry>,
    pub steps: Vec<StepTrace>,
}

/// One plan from `state` (default: the most likely start state), with its trace.
pub fn decode(config: &ExperimentConfig, paths: &Paths, state: Option<Vec<f64>>) -> Result<DecodeTrace> {
    let model = load_model(paths)?;
    let env = Environment::from_config(config)?;
    let decoder = config.decoder_config()?;
    let state = state.unwrap_or_else(|| env.start_state());
    if state.len() != model.spec().state_dim {
        return Err(ValidationError(format!(
            "state has {} components, the model expects {}",
            state.len(),
            model.spec().state_dim
        ))
        .into());
    }
    let planned = plan_action(&model, &[], &state, &decoder, true)?;
    let trace = DecodeTrace {
        strategy: decoder.strategy,
        state,
        action: planned.action,
        action_tokens: planned.action_tokens,
        beam: planned
            .output
            .beam
            .iter()
            .zip(&planned.output.scores)
            .map(|(c, &score)| BeamEntry {
                tokens: c.trajectory.tokens(),
                score,
            })
            .collect(),
        steps: planned.output.trace,
    };
    fs::write(paths.trace(), serde_json::to_string_pretty(&trace)?)
        .with_context(|| format!("cannot write {}", paths.trace().display()))?;
    Ok(trace)
}

/// Closed-loop returns for every configured strategy and seed, plus summaries.
pub fn evaluate(config: &ExperimentConfig, model: &CountModel, env: &Environment) -> Result<Vec<ResultRow>> {
    let seeds = config.eval_seeds();
    let mut rows = Vec::new();
    for &strategy in &config.eval.strategies {
        let decoder = config.decoder_for(strategy)?;
        let mut outcomes = rollout(
            &env.mdp,
            |s| MpcController::new(model, decoder, derive_seed(decoder.seed, &[s])),
            &seeds,
        )?;
        outcomes.sort_by_key(|o| o.seed);
        for o in &outcomes {
            if let Some(reason) = &o.failure {
                log::warn!("{strategy} seed {}: {reason}", o.seed);
            }
            rows.push(ResultRow::episode(strategy.name(), o.seed, o.total_return, o.failed()));
        }
    }
    let summaries = summarize(&rows);
    rows.extend(summaries);
    Ok(rows)
}

pub fn eval(config: &ExperimentConfig, paths: &Paths) -> Result<Vec<ResultRow>> {
    let model = load_model(paths)?;
    let env = Environment::from_config(config)?;
    let rows = evaluate(config, &model, &env)?;
    write_rows(&paths.results(), &rows)?;
    Ok(rows)
}

/// Merge the episode rows of several results files into per-strategy summaries.
pub fn report(inputs: &[PathBuf], paths: &Paths) -> Result<Vec<ResultRow>> {
    if inputs.is_empty() {
        return Err(ValidationError("report needs at least one results file".into()).into());
    }
    let mut episodes = Vec::new();
    for path in inputs {
        episodes.extend(read_rows(path)?.into_iter().filter(|r| r.row == RowKind::Episode));
    }
    let summaries = summarize(&episodes);
    paths.ensure()?;
    write_rows(&paths.report(), &summaries)?;
    write_plot_data(&paths.plot_data(), &plot_points(&summaries))?;
    Ok(summaries)
}
