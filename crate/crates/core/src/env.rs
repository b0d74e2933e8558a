//! Tabular ground-truth MDPs, behavior datasets and closed-loop rollouts.
//!
//! States and actions are integer ids. Each id carries a small real-valued
//! feature vector, and that vector is what the discretizer and the model
//! see. The risky chain uses two state features (lane, position) and one
//! action feature.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeds::{derive_seed, substream};
use crate::tokens::Episode;

const ROW_TOLERANCE: f64 = 1e-12;

/// Finite-horizon tabular MDP with feature embeddings for states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub rho0: Vec<f64>,
    pub horizon: usize,
    pub state_features: Vec<Vec<f64>>,
    pub action_features: Vec<Vec<f64>>,
}

fn check_distribution(row: &[f64], what: &'static str, label: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid(what, format!("{label} has negative or non-finite entries")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(invalid(what, format!("{label} sums to {sum}, not 1")));
    }
    Ok(())
}

fn check_features(features: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(invalid(what, "feature vectors must be non-empty"));
    }
    for f in features {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: dim,
                got: f.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(dim)
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        let m = self.n_actions();
        if n == 0 || m == 0 {
            return Err(invalid("mdp", "needs at least one state and one action"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        for (what, len, expected) in [
            ("rewards", self.rewards.len(), n),
            ("rho0", self.rho0.len(), n),
            ("state_features", self.state_features.len(), n),
            ("action_features", self.action_features.len(), m),
        ] {
            if len != expected {
                return Err(Error::DimensionMismatch { what, expected, got: len });
            }
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "transitions",
                    expected: m,
                    got: row.len(),
                });
            }
            for (a, p) in row.iter().enumerate() {
                if p.len() != n {
                    return Err(Error::DimensionMismatch {
                        what: "transitions",
                        expected: n,
                        got: p.len(),
                    });
                }
                check_distribution(p, "transitions", &format!("P(.|{s},{a})"))?;
            }
        }
        for r in &self.rewards {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "rewards",
                    expected: m,
                    got: r.len(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("rewards"));
            }
        }
        check_distribution(&self.rho0, "rho0", "rho0")?;
        check_features(&self.state_features, "state_features")?;
        check_features(&self.action_features, "action_features")?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    pub fn state_dim(&self) -> usize {
        self.state_features.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.action_features.first().map_or(0, Vec::len)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mdp: Self = serde_json::from_str(&text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Action id whose feature vector is nearest to `action`; lowest id on ties.
    pub fn nearest_action(&self, action: &[f64]) -> Result<usize> {
        if action.len() != self.action_dim() {
            return Err(Error::DimensionMismatch {
                what: "action",
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        let dist = |f: &[f64]| f.iter().zip(action).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut best = 0;
        for a in 1..self.n_actions() {
            if dist(&self.action_features[a]) < dist(&self.action_features[best]) {
                best = a;
            }
        }
        Ok(best)
    }

    fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.rho0, rng)
    }

    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
        (self.rewards[s][a], sample_index(&self.transitions[s][a], rng))
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    // Rows are validated, so the weights are never all zero.
    WeightedIndex::new(probs).expect("validated distribution").sample(rng)
}

/// Stochastic behavior policy `pi_B(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub table: Vec<Vec<f64>>,
}

impl BehaviorPolicy {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in table.iter().enumerate() {
            check_distribution(row, "policy", &format!("pi(.|{s})"))?;
        }
        Ok(Self { table })
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        Self::epsilon_greedy(actions, 0.0, n_actions)
    }

    /// Takes `base[s]` with probability `1 - epsilon`, otherwise a uniform action.
    pub fn epsilon_greedy(base: &[usize], epsilon: f64, n_actions: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(invalid("epsilon", "must lie in [0, 1]"));
        }
        if n_actions == 0 {
            return Err(invalid("n_actions", "must be at least 1"));
        }
        let table = base
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(invalid("base", format!("action {a} out of range")));
                }
                let mut row = vec![epsilon / n_actions as f64; n_actions];
                row[a] += 1.0 - epsilon;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(table)
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.table.len() != mdp.n_states() {
            return Err(Error::DimensionMismatch {
                what: "policy states",
                expected: mdp.n_states(),
                got: self.table.len(),
            });
        }
        if let Some(row) = self.table.iter().find(|r| r.len() != mdp.n_actions()) {
            return Err(Error::DimensionMismatch {
                what: "policy actions",
                expected: mdp.n_actions(),
                got: row.len(),
            });
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(&self.table[s], rng)
    }
}

/// Visited ids of one simulated episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

/// Roll `policy` through `mdp` once; returns the visited ids and rewards.
pub fn simulate_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &BehaviorPolicy,
    rng: &mut R,
) -> (IdEpisode, Vec<f64>) {
    let mut s = mdp.sample_start(rng);
    let mut ids = IdEpisode {
        states: Vec::with_capacity(mdp.horizon),
        actions: Vec::with_capacity(mdp.horizon),
    };
    let mut rewards = Vec::with_capacity(mdp.horizon);
    for _ in 0..mdp.horizon {
        let a = policy.sample(s, rng);
        let (r, next) = mdp.step(s, a, rng);
        ids.states.push(s);
        ids.actions.push(a);
        rewards.push(r);
        s = next;
    }
    (ids, rewards)
}

fn embed(mdp: &TabularMdp, ids: &IdEpisode, rewards: Vec<f64>) -> Episode {
    Episode {
        states: ids.states.iter().map(|&s| mdp.state_features[s].clone()).collect(),
        actions: ids.actions.iter().map(|&a| mdp.action_features[a].clone()).collect(),
        rewards,
    }
}

/// Episode ids as well as embedded episodes; episode `i` uses substream `(seed, i)`.
pub fn generate_id_dataset(
    mdp: &TabularMdp,
    policy: &BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<(IdEpisode, Vec<f64>)>> {
    mdp.validate()?;
    policy.check(mdp)?;
    if episodes == 0 {
        return Err(invalid("episodes", "must be at least 1"));
    }
    Ok((0..episodes)
        .into_par_iter()
        .map(|i| simulate_episode(mdp, policy, &mut substream(seed, &[i as u64])))
        .collect())
}

pub fn generate_dataset(mdp: &TabularMdp, policy: &BehaviorPolicy, episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    Ok(generate_id_dataset(mdp, policy, episodes, seed)?
        .into_iter()
        .map(|(ids, rewards)| embed(mdp, &ids, rewards))
        .collect())
}

/// Value of `policy` at time 0 for every state, by backward induction over the horizon.
pub fn exact_policy_value(mdp: &TabularMdp, policy: &BehaviorPolicy, gamma: f64) -> Result<Vec<f64>> {
    mdp.validate()?;
    policy.check(mdp)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("must lie in (0, 1], got {gamma}")));
    }
    let n = mdp.n_states();
    let mut value = vec![0.0; n];
    for _ in 0..mdp.horizon {
        value = (0..n)
            .map(|s| {
                policy.table[s]
                    .iter()
                    .enumerate()
                    .map(|(a, pa)| {
                        let future: f64 = mdp.transitions[s][a].iter().zip(&value).map(|(p, v)| p * v).sum();
                        pa * (mdp.rewards[s][a] + gamma * future)
                    })
                    .sum()
            })
            .collect();
    }
    Ok(value)
}

/// `rho0 . V`.
pub fn expected_return(mdp: &TabularMdp, policy: &BehaviorPolicy, gamma: f64) -> Result<f64> {
    let v = exact_policy_value(mdp, policy, gamma)?;
    Ok(mdp.rho0.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// A closed-loop controller driven by [`rollout`].
pub trait Controller {
    /// Called once before the first step of an episode.
    fn reset(&mut self);

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>>;

    /// Called after every executed step.
    fn observe(&mut self, state: &[f64], action: &[f64], reward: f64) -> Result<()>;
}

/// Result of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    /// Undiscounted return of the executed steps.
    pub total_return: f64,
    pub trajectory: IdEpisode,
    pub rewards: Vec<f64>,
    /// Planner error that ended the episode early, if any.
    pub failure: Option<String>,
}

impl EpisodeOutcome {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Run one episode of receding-horizon control under environment seed `seed`.
pub fn rollout_episode<C: Controller + ?Sized>(mdp: &TabularMdp, controller: &mut C, seed: u64) -> EpisodeOutcome {
    let mut rng = substream(seed, &[]);
    let mut s = mdp.sample_start(&mut rng);
    let mut trajectory = IdEpisode {
        states: Vec::new(),
        actions: Vec::new(),
    };
    let mut rewards = Vec::new();
    let mut failure = None;
    controller.reset();
    for _ in 0..mdp.horizon {
        let features = &mdp.state_features[s];
        let step = controller
            .act(features)
            .and_then(|action| Ok((mdp.nearest_action(&action)?, action)));
        let (a, action) = match step {
            Ok(x) => x,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let (r, next) = mdp.step(s, a, &mut rng);
        trajectory.states.push(s);
        trajectory.actions.push(a);
        rewards.push(r);
        if let Err(e) = controller.observe(features, &action, r) {
            failure = Some(e.to_string());
            break;
        }
        s = next;
    }
    EpisodeOutcome {
        seed,
        total_return: rewards.iter().sum(),
        trajectory,
        rewards,
        failure,
    }
}

/// One episode per seed, in parallel; `make` builds a fresh controller for each seed.
pub fn rollout<C, F>(mdp: &TabularMdp, make: F, seeds: &[u64]) -> Result<Vec<EpisodeOutcome>>
where
    C: Controller,
    F: Fn(u64) -> C + Sync,
{
    mdp.validate()?;
    Ok(seeds
        .par_iter()
        .map(|&seed| {
            let mut controller = make(seed);
            rollout_episode(mdp, &mut controller, seed)
        })
        .collect())
}

/// Controller that follows a behavior policy by id, for oracles and baselines.
pub struct PolicyController<'a> {
    mdp: &'a TabularMdp,
    policy: &'a BehaviorPolicy,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> PolicyController<'a> {
    pub fn new(mdp: &'a TabularMdp, policy: &'a BehaviorPolicy, seed: u64) -> Self {
        Self {
            mdp,
            policy,
            rng: substream(derive_seed(seed, &[1]), &[]),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn reset(&mut self) {}

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let s = self
            .mdp
            .state_features
            .iter()
            .position(|f| f.as_slice() == state)
            .ok_or_else(|| invalid("state", "not a state of this MDP"))?;
        let a = self.policy.sample(s, &mut self.rng);
        Ok(self.mdp.action_features[a].clone())
    }

    fn observe(&mut self, _: &[f64], _: &[f64], _: f64) -> Result<()> {
        Ok(())
    }
}

/// Two corridors from a shared start state.
///
/// Action 0 at the start enters corridor A, which pays `r_safe` per step.
/// Action 1 enters corridor B with two reward levels per step. With
/// probability `catastrophe_prob` it instead falls into a pit that pays
/// `-catastrophe_penalty` once and nothing afterwards. Inside the
/// corridors the action has no effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskyChainSpec {
    pub corridor_len: usize,
    pub r_safe: f64,
    pub r_risky_high: f64,
    pub r_risky_low: f64,
    pub risky_high_prob: f64,
    pub catastrophe_prob: f64,
    pub catastrophe_penalty: f64,
    /// Probability that a behavior episode enters corridor B.
    pub data_coverage: f64,
}

impl Default for RiskyChainSpec {
    fn default() -> Self {
        Self {
            corridor_len: 3,
            r_safe: 1.0,
            r_risky_high: 3.2,
            r_risky_low: -0.6,
            risky_high_prob: 0.5,
            catastrophe_prob: 0.02,
            catastrophe_penalty: 300.0,
            data_coverage: 0.05,
        }
    }
}

/// State ids of a built risky chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RiskyChainLayout {
    pub corridor_len: usize,
}

impl RiskyChainLayout {
    pub const START: usize = 0;
    pub const SAFE_ACTION: usize = 0;
    pub const RISKY_ACTION: usize = 1;

    /// `i` in `1..=L`.
    pub fn safe(&self, i: usize) -> usize {
        i
    }

    pub fn risky(&self, i: usize, high: bool) -> usize {
        self.corridor_len + 2 * i - usize::from(high)
    }

    pub fn pit(&self) -> usize {
        3 * self.corridor_len + 1
    }

    pub fn dead(&self) -> usize {
        self.pit() + 1
    }

    pub fn end(&self) -> usize {
        self.pit() + 2
    }

    pub fn n_states(&self) -> usize {
        self.pit() + 3
    }
}

/// Built MDP, its behavior policy and named reference policies.
#[derive(Debug, Clone)]
pub struct RiskyChain {
    pub spec: RiskyChainSpec,
    pub layout: RiskyChainLayout,
    pub mdp: TabularMdp,
    pub behavior: BehaviorPolicy,
}

impl RiskyChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.corridor_len == 0 {
            return Err(invalid("corridor_len", "must be at least 1"));
        }
        for (name, p) in [
            ("risky_high_prob", self.risky_high_prob),
            ("catastrophe_prob", self.catastrophe_prob),
            ("data_coverage", self.data_coverage),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        for (name, x) in [
            ("r_safe", self.r_safe),
            ("r_risky_high", self.r_risky_high),
            ("r_risky_low", self.r_risky_low),
            ("catastrophe_penalty", self.catastrophe_penalty),
        ] {
            if !x.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<RiskyChain> {
        self.validate()?;
        let len = self.corridor_len;
        let layout = RiskyChainLayout { corridor_len: len };
        let n = layout.n_states();
        let point = |s: usize| {
            let mut row = vec![0.0; n];
            row[s] = 1.0;
            row
        };
        let to_risky = |i: usize, catastrophe: f64| {
            let mut row = vec![0.0; n];
            let q = self.risky_high_prob;
            row[layout.risky(i, true)] = (1.0 - catastrophe) * q;
            row[layout.risky(i, false)] = (1.0 - catastrophe) * (1.0 - q);
            row[layout.pit()] += catastrophe;
            row
        };
        let mut transitions = vec![Vec::new(); n];
        let mut rewards = vec![vec![0.0; 2]; n];
        let mut state_features = vec![Vec::new(); n];

        transitions[RiskyChainLayout::START] = vec![point(layout.safe(1)), to_risky(1, self.catastrophe_prob)];
        state_features[RiskyChainLayout::START] = vec![0.0, 0.0];
        for i in 1..=len {
            let next_safe = if i < len { point(layout.safe(i + 1)) } else { point(layout.end()) };
            transitions[layout.safe(i)] = vec![next_safe.clone(), next_safe];
            rewards[layout.safe(i)] = vec![self.r_safe; 2];
            state_features[layout.safe(i)] = vec![-1.0, i as f64];
            for high in [true, false] {
                let s = layout.risky(i, high);
                let next = if i < len { to_risky(i + 1, 0.0) } else { point(layout.end()) };
                transitions[s] = vec![next.clone(), next];
                let r = if high { self.r_risky_high } else { self.r_risky_low };
                rewards[s] = vec![r; 2];
                state_features[s] = vec![1.0, i as f64];
            }
        }
        transitions[layout.pit()] = vec![point(layout.dead()); 2];
        rewards[layout.pit()] = vec![-self.catastrophe_penalty; 2];
        state_features[layout.pit()] = vec![2.0, 1.0];
        transitions[layout.dead()] = vec![point(layout.dead()); 2];
        state_features[layout.dead()] = vec![2.0, 2.0];
        transitions[layout.end()] = vec![point(layout.end()); 2];
        state_features[layout.end()] = vec![0.0, (len + 1) as f64];

        let mut rho0 = vec![0.0; n];
        rho0[RiskyChainLayout::START] = 1.0;
        let mdp = TabularMdp {
            transitions,
            rewards,
            rho0,
            horizon: len + 1,
            state_features,
            action_features: vec![vec![0.0], vec![1.0]],
        };
        mdp.validate()?;

        // Epsilon-soft toward corridor A: uniform exploration with epsilon = 2 * coverage.
        let behavior = BehaviorPolicy::epsilon_greedy(&vec![RiskyChainLayout::SAFE_ACTION; n], 2.0 * self.data_coverage, 2)?;
        Ok(RiskyChain {
            spec: *self,
            layout,
            mdp,
            behavior,
        })
    }
}

impl RiskyChain {
    /// Policy that always takes `action`.
    pub fn constant_policy(&self, action: usize) -> Result<BehaviorPolicy> {
        BehaviorPolicy::deterministic(&vec![action; self.mdp.n_states()], 2)
    }

    /// Exact time-0 value of the start state when committing to each corridor.
    pub fn corridor_values(&self, gamma: f64) -> Result<(f64, f64)> {
        let start = RiskyChainLayout::START;
        let a = exact_policy_value(&self.mdp, &self.constant_policy(RiskyChainLayout::SAFE_ACTION)?, gamma)?[start];
        let b = exact_policy_value(&self.mdp, &self.constant_policy(RiskyChainLayout::RISKY_ACTION)?, gamma)?[start];
        Ok((a, b))
    }

    /// Whether an executed trajectory entered corridor B (or its pit).
    pub fn entered_risky(&self, trajectory: &IdEpisode) -> bool {
        trajectory.actions.first() == Some(&RiskyChainLayout::RISKY_ACTION)
            && trajectory.states.first() == Some(&RiskyChainLayout::START)
    }
}
