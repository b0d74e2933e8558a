//! Beam search as a meta-algorithm with pluggable `score` and `prune`.
//!
//! Three strategies are provided:
//!
//! * `reward_greedy` scores candidates by their discounted expected return
//!   plus final reward-to-go and keeps the top `b`.
//! * `likelihood` scores by cumulative log-probability and keeps the top `b`
//!   (behavior cloning).
//! * `pbs` solves a mean-variance allocation over the candidates and draws
//!   `b` of them with repetition in proportion to their weights. A candidate
//!   drawn `k` times is expanded `k * e` times on the next step.
//!
//! Every random draw is taken from a substream keyed by
//! `(seed, step, parent, sample)`, so parallel expansion is reproducible.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Controller;
use crate::error::{invalid, Error, Result};
use crate::eval::{build_portfolio_inputs, trajectory_mean, Asset, MomentLedger, PortfolioInputs, PortfolioRecord};
use crate::model::{sample_transition, SequenceModel};
use crate::portfolio::{solve_portfolio, PortfolioProblem, RegularizationMode, SolveOptions};
use crate::seeds::{derive_seed, substream};
use crate::tokens::{Token, Trajectory};

/// Counter used for the prune draw of each step.
const PRUNE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pbs,
    RewardGreedy,
    Likelihood,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pbs => "pbs",
            Self::RewardGreedy => "reward_greedy",
            Self::Likelihood => "likelihood",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pbs" => Ok(Self::Pbs),
            "reward_greedy" | "reward-greedy" => Ok(Self::RewardGreedy),
            "likelihood" => Ok(Self::Likelihood),
            other => Err(invalid("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub beam_width: usize,
    pub horizon: usize,
    /// Samples drawn per unit of multiplicity of each beam entry.
    pub expansion_factor: usize,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub reg_sign: RegularizationMode,
    pub temperature: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::paper_default()
    }
}

impl DecoderConfig {
    /// `delta = 1`, `alpha = 0.1`, `gamma = 0.99`.
    pub fn paper_default() -> Self {
        Self {
            beam_width: 8,
            horizon: 3,
            expansion_factor: 2,
            gamma: 0.99,
            delta: 1.0,
            alpha: 0.1,
            reg_sign: RegularizationMode::Spread,
            temperature: 1.0,
            strategy: Strategy::Pbs,
            seed: 0,
            solver_tol: 1e-10,
            solver_max_iters: 20_000,
        }
    }

    /// `delta = alpha = 0.01`.
    pub fn risk_tolerant() -> Self {
        Self {
            delta: 0.01,
            alpha: 0.01,
            ..Self::paper_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::paper_default()),
            "risk-tolerant" => Ok(Self::risk_tolerant()),
            other => Err(invalid("preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(invalid("beam_width", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.expansion_factor == 0 {
            return Err(invalid("expansion_factor", "must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite() && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("delta/alpha", "must be finite and non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.solver_tol,
            max_iters: self.solver_max_iters,
            trace: false,
        }
    }
}

/// A partial trajectory in the beam.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    pub trajectory: Trajectory,
    pub ledger: MomentLedger,
    pub cumulative_log_prob: f64,
    /// Index of the parent in the previous beam; `None` for the root.
    pub parent_index: Option<usize>,
    /// Number of times this candidate was retained by the last prune.
    pub multiplicity: usize,
    /// Seed of the substream that produced the last transition.
    pub rng_stream_id: u64,
}

impl BeamCandidate {
    fn root(origin: Vec<Token>, multiplicity: usize) -> Self {
        Self {
            trajectory: Trajectory::new(origin),
            ledger: MomentLedger::new(),
            cumulative_log_prob: 0.0,
            parent_index: None,
            multiplicity,
            rng_stream_id: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.trajectory.depth()
    }
}

impl Asset for BeamCandidate {
    fn path_tokens(&self) -> Vec<Token> {
        self.trajectory.tokens()
    }

    fn ledger(&self) -> &MomentLedger {
        &self.ledger
    }
}

/// Output of a `score` function.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub values: Vec<f64>,
    /// Populated by the portfolio scorer.
    pub portfolio: Option<PortfolioInputs>,
}

impl Scores {
    pub fn plain(values: Vec<f64>) -> Self {
        Self {
            values,
            portfolio: None,
        }
    }
}

/// A retained candidate and the score it was retained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Kept {
    pub candidate: BeamCandidate,
    pub score: f64,
}

pub fn score_reward_greedy(candidates: &[BeamCandidate], config: &DecoderConfig) -> Result<Scores> {
    candidates
        .iter()
        .map(|c| trajectory_mean(&c.ledger, config.gamma))
        .collect::<Result<Vec<_>>>()
        .map(Scores::plain)
}

pub fn score_likelihood(candidates: &[BeamCandidate], _config: &DecoderConfig) -> Result<Scores> {
    Ok(Scores::plain(candidates.iter().map(|c| c.cumulative_log_prob).collect()))
}

pub fn score_pbs(candidates: &[BeamCandidate], config: &DecoderConfig) -> Result<Scores> {
    let inputs = build_portfolio_inputs(candidates, config.gamma)?;
    let problem = PortfolioProblem::new(
        inputs.mu.clone(),
        inputs.covariance.clone(),
        config.delta,
        config.alpha,
        config.reg_sign,
    )?;
    let solution = solve_portfolio(&problem, config.solve_options())?;
    if solution.nonconcave {
        log::debug!("portfolio program is not concave; using a KKT point");
    }
    if !solution.converged {
        log::debug!("portfolio solver hit the iteration limit");
    }
    Ok(Scores {
        values: solution.weights.as_slice().to_vec(),
        portfolio: Some(inputs),
    })
}

/// Indices ordered by score descending, then by `secondary` descending, then by index.
pub fn rank(scores: &[f64], secondary: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| match secondary {
                Some(s) => s[b].total_cmp(&s[a]),
                None => std::cmp::Ordering::Equal,
            })
            .then(a.cmp(&b))
    });
    order
}

/// Deterministic top-`b` by score, ties to the lower index.
pub fn prune_top_b(candidates: Vec<BeamCandidate>, scores: &Scores, b: usize) -> Vec<Kept> {
    // Portfolio weights tie at zero for excluded assets; fall back on the mean.
    let secondary = scores.portfolio.as_ref().map(|p| p.mu.as_slice());
    let order = rank(&scores.values, secondary);
    let mut slots: Vec<Option<BeamCandidate>> = candidates.into_iter().map(Some).collect();
    order
        .into_iter()
        .take(b)
        .map(|i| {
            let mut candidate = slots[i].take().expect("each index ranked once");
            candidate.multiplicity = 1;
            Kept {
                candidate,
                score: scores.values[i],
            }
        })
        .collect()
}

/// Draw `b` candidates with repetition from `Categorical(w)`; keep the distinct ones.
pub fn prune_pbs(candidates: Vec<BeamCandidate>, weights: &[f64], b: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Kept>> {
    if weights.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: candidates.len(),
            got: weights.len(),
        });
    }
    let dist = WeightedIndex::new(weights).map_err(|e| invalid("weights", e.to_string()))?;
    let mut hits = vec![0usize; candidates.len()];
    for _ in 0..b {
        hits[dist.sample(rng)] += 1;
    }
    Ok(candidates
        .into_iter()
        .zip(hits)
        .enumerate()
        .filter(|(_, (_, k))| *k > 0)
        .map(|(i, (mut candidate, k))| {
            candidate.multiplicity = k;
            Kept {
                candidate,
                score: weights[i],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub candidates: Vec<Vec<Token>>,
    pub scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub portfolio: Option<PortfolioRecord>,
    /// `(candidate index, multiplicity)` of every retained candidate.
    pub kept: Vec<(usize, usize)>,
}

/// Final beam sorted by score descending.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub beam: Vec<BeamCandidate>,
    pub scores: Vec<f64>,
    /// Beam size after each prune.
    pub widths: Vec<usize>,
    pub trace: Vec<StepTrace>,
}

impl BeamOutput {
    pub fn best(&self) -> Option<&BeamCandidate> {
        self.beam.first()
    }
}

/// Drop whole leading transitions while keeping at least `window` tokens.
fn trim_context(context: &[Token], window: usize, transition_len: usize) -> &[Token] {
    if context.len() <= window {
        return context;
    }
    let excess = context.len() - window;
    let drop = excess - excess % transition_len;
    &context[drop..]
}

/// Run beam search from `start`, which must end with the start-state tokens.
///
/// `score` assigns one value per candidate; `prune` keeps at most `b` of
/// them. The returned beam is sorted by score, highest first.
pub fn beam_search<M, S, P>(
    model: &M,
    start: &[Token],
    config: &DecoderConfig,
    trace: bool,
    score: S,
    mut prune: P,
) -> Result<BeamOutput>
where
    M: SequenceModel + ?Sized,
    S: Fn(&[BeamCandidate], &DecoderConfig) -> Result<Scores>,
    P: FnMut(Vec<BeamCandidate>, &Scores, usize, &mut ChaCha8Rng) -> Result<Vec<Kept>>,
{
    config.validate()?;
    let spec = model.spec();
    let len = spec.transition_len();
    let k = spec.state_dim;
    if start.len() < k || start.len() % len != k {
        return Err(invalid(
            "start",
            format!("context of {} tokens does not end with a start state", start.len()),
        ));
    }
    let (history, origin) = start.split_at(start.len() - k);
    let history = trim_context(history, model.context_window(), len);
    let b = config.beam_width;

    // The root holds the whole budget.
    let mut beam = vec![BeamCandidate::root(origin.to_vec(), b)];
    let mut scores: Vec<f64> = vec![0.0];
    let mut widths = Vec::with_capacity(config.horizon);
    let mut steps = Vec::new();

    for step in 1..=config.horizon {
        let expanded: Vec<Vec<BeamCandidate>> = beam
            .par_iter()
            .enumerate()
            .map(|(j, parent)| expand(model, history, parent, j, step, config))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Decode {
                step,
                source: Box::new(e),
            })?;
        let candidates: Vec<BeamCandidate> = expanded.into_iter().flatten().collect();
        let step_scores = score(&candidates, config).map_err(|e| Error::Decode {
            step,
            source: Box::new(e),
        })?;
        if step_scores.values.len() != candidates.len() {
            return Err(Error::DimensionMismatch {
                what: "scores",
                expected: candidates.len(),
                got: step_scores.values.len(),
            });
        }
        let tokens = if trace {
            candidates.iter().map(|c| c.trajectory.tokens()).collect()
        } else {
            Vec::new()
        };
        let mut rng = substream(config.seed, &[step as u64, PRUNE_STREAM]);
        let kept = prune(candidates.clone(), &step_scores, b, &mut rng).map_err(|e| Error::Decode {
            step,
            source: Box::new(e),
        })?;
        assert!(kept.len() <= b, "beam grew to {} > {b} at step {step}", kept.len());
        if kept.is_empty() {
            return Err(Error::EmptyBeam);
        }
        if trace {
            let kept_index = kept
                .iter()
                .map(|kc| {
                    let i = candidates
                        .iter()
                        .position(|c| c.trajectory == kc.candidate.trajectory)
                        .expect("kept candidate comes from the candidate set");
                    (i, kc.candidate.multiplicity)
                })
                .collect();
            steps.push(StepTrace {
                step,
                candidates: tokens,
                scores: step_scores.values.clone(),
                portfolio: step_scores.portfolio.as_ref().map(PortfolioInputs::to_record),
                kept: kept_index,
            });
        }
        widths.push(kept.len());
        scores = kept.iter().map(|k| k.score).collect();
        beam = kept.into_iter().map(|k| k.candidate).collect();
    }

    let order = rank(&scores, None);
    let mut slots: Vec<Option<BeamCandidate>> = beam.into_iter().map(Some).collect();
    let beam = order.iter().map(|&i| slots[i].take().expect("ranked once")).collect();
    let scores = order.iter().map(|&i| scores[i]).collect();
    Ok(BeamOutput {
        beam,
        scores,
        widths,
        trace: steps,
    })
}

fn expand<M: SequenceModel + ?Sized>(
    model: &M,
    history: &[Token],
    parent: &BeamCandidate,
    parent_index: usize,
    step: usize,
    config: &DecoderConfig,
) -> Result<Vec<BeamCandidate>> {
    let mut context = history.to_vec();
    if parent.depth() == 0 {
        context.extend_from_slice(&parent.trajectory.origin);
    } else {
        context.extend_from_slice(&parent.trajectory.tokens());
    }
    let context = trim_context(&context, model.context_window(), model.spec().transition_len());
    let samples = parent.multiplicity * config.expansion_factor;
    let mut children: Vec<BeamCandidate> = Vec::with_capacity(samples);
    for s in 0..samples {
        let path = [step as u64, parent_index as u64, s as u64];
        let stream = derive_seed(config.seed, &path);
        let mut rng = substream(config.seed, &path);
        let sampled = sample_transition(model, context, config.temperature, &mut rng)?;
        // Copies of one transition from the same parent are scored once.
        if children
            .iter()
            .any(|c| c.trajectory.transitions.last() == Some(&sampled.transition))
        {
            continue;
        }
        let mut child = parent.clone();
        child.trajectory.transitions.push(sampled.transition);
        child.ledger.push(&sampled.reward_dist, &sampled.rtg_dist);
        child.cumulative_log_prob += sampled.log_prob;
        child.parent_index = Some(parent_index);
        child.multiplicity = 1;
        child.rng_stream_id = stream;
        children.push(child);
    }
    Ok(children)
}

/// Beam search with the score/prune pair selected by `config.strategy`.
pub fn decode<M: SequenceModel + ?Sized>(model: &M, start: &[Token], config: &DecoderConfig, trace: bool) -> Result<BeamOutput> {
    match config.strategy {
        Strategy::RewardGreedy => beam_search(model, start, config, trace, score_reward_greedy, |c, s, b, _| {
            Ok(prune_top_b(c, s, b))
        }),
        Strategy::Likelihood => beam_search(model, start, config, trace, score_likelihood, |c, s, b, _| {
            Ok(prune_top_b(c, s, b))
        }),
        Strategy::Pbs => beam_search(model, start, config, trace, score_pbs, |c, s, b, rng| {
            prune_pbs(c, &s.values, b, rng)
        }),
    }
}

/// First action of the best final candidate, with the search that produced it.
#[derive(Debug, Clone)]
pub struct PlannedAction {
    pub action: Vec<f64>,
    pub action_tokens: Vec<Token>,
    pub output: BeamOutput,
}

/// Plan from `state` given the executed `history` (whole transitions) and
/// return the first action of the top-ranked final candidate.
pub fn plan_action<M: SequenceModel + ?Sized>(
    model: &M,
    history: &[Token],
    state: &[f64],
    config: &DecoderConfig,
    trace: bool,
) -> Result<PlannedAction> {
    let spec = model.spec();
    if history.len() % spec.transition_len() != 0 {
        return Err(invalid("history", "must hold whole transitions"));
    }
    let mut start = history.to_vec();
    start.extend(spec.encode_state(state)?);
    let output = decode(model, &start, config, trace)?;
    let best = output.best().ok_or(Error::EmptyBeam)?;
    let first = best.trajectory.transitions.first().ok_or(Error::EmptyBeam)?;
    Ok(PlannedAction {
        action: spec.decode_action(&first.action),
        action_tokens: first.action.clone(),
        output,
    })
}

/// Closed-loop token context for receding-horizon control.
///
/// The reward-to-go of an executed step is unknown when it is appended,
/// so the model's most probable reward-to-go token is used in its place.
#[derive(Debug, Clone, Default)]
pub struct ContextBuffer {
    tokens: Vec<Token>,
}

impl ContextBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
    }

    pub fn push_executed<M: SequenceModel + ?Sized>(
        &mut self,
        model: &M,
        state: &[f64],
        action: &[f64],
        reward: f64,
    ) -> Result<()> {
        let spec = model.spec();
        let mut next = self.tokens.clone();
        next.extend(spec.encode_state(state)?);
        next.extend(spec.encode_action(action)?);
        if !reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        next.push(spec.channel(spec.reward_channel()).encode(reward));
        let ctx = trim_context(&next, model.context_window(), spec.transition_len());
        let rtg = model.next_token_dist(ctx, 1.0)?.mode();
        next.push(rtg);
        let keep = trim_context(&next, model.context_window(), spec.transition_len()).len();
        self.tokens = next.split_off(next.len() - keep);
        Ok(())
    }
}

/// Receding-horizon controller: replans from every observed state.
///
/// Step `t` of an episode decodes with seed `derive_seed(seed, [t])`.
pub struct MpcController<'a, M: SequenceModel + ?Sized> {
    model: &'a M,
    config: DecoderConfig,
    seed: u64,
    step: u64,
    context: ContextBuffer,
    /// First-step decodes, recorded when `keep_plans` is set.
    pub plans: Vec<BeamOutput>,
    keep_plans: bool,
}

impl<'a, M: SequenceModel + ?Sized> MpcController<'a, M> {
    pub fn new(model: &'a M, config: DecoderConfig, seed: u64) -> Self {
        Self {
            model,
            config,
            seed,
            step: 0,
            context: ContextBuffer::new(),
            plans: Vec::new(),
            keep_plans: false,
        }
    }

    pub fn keep_plans(mut self, keep: bool) -> Self {
        self.keep_plans = keep;
        self
    }
}

impl<M: SequenceModel + ?Sized> Controller for MpcController<'_, M> {
    fn reset(&mut self) {
        self.step = 0;
        self.context.clear();
        self.plans.clear();
    }

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let config = DecoderConfig {
            seed: derive_seed(self.seed, &[self.step]),
            ..self.config
        };
        let planned = plan_action(self.model, self.context.tokens(), state, &config, false)?;
        if self.keep_plans {
            self.plans.push(planned.output);
        }
        Ok(planned.action)
    }

    fn observe(&mut self, state: &[f64], action: &[f64], reward: f64) -> Result<()> {
        self.step += 1;
        self.context.push_executed(self.model, state, action, reward)
    }
}
