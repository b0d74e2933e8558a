//! Token vocabularies, per-channel discretization and trajectory containers.
//!
//! A transition is flattened into `K + M + 2` tokens in channel order:
//! state dimensions, action dimensions, reward, reward-to-go. Each channel
//! is discretized on its own uniform grid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Token = u32;

/// Width added to a channel whose observed values are all identical.
pub const ZERO_WIDTH_EPSILON: f64 = 1e-6;

/// Uniform binning of one real-valued channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub bins: u32,
    pub min: f64,
    pub max: f64,
}

impl Channel {
    pub fn new(bins: u32, min: f64, max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(invalid("bins", format!("need at least 2 bins, got {bins}")));
        }
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::NonFinite("channel range"));
        }
        if min >= max {
            return Err(invalid("range", format!("min {min} must be below max {max}")));
        }
        Ok(Self { bins, min, max })
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.bins as f64
    }

    /// Bin index of `value`; out-of-range values clamp to the boundary bins.
    pub fn encode(&self, value: f64) -> Token {
        let raw = ((value - self.min) / self.width()).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else if raw >= (self.bins - 1) as f64 {
            self.bins - 1
        } else {
            raw as Token
        }
    }

    /// Midpoint of bin `token`.
    pub fn decode(&self, token: Token) -> f64 {
        self.min + (token as f64 + 0.5) * self.width()
    }

    pub fn bin_values(&self) -> Vec<f64> {
        (0..self.bins).map(|t| self.decode(t)).collect()
    }
}

/// Which part of a transition a token position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    State(usize),
    Action(usize),
    Reward,
    RewardToGo,
}

/// Bin counts per channel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub state: u32,
    pub action: u32,
    pub reward: u32,
    pub rtg: u32,
}

impl BinCounts {
    pub fn uniform(bins: u32) -> Self {
        Self {
            state: bins,
            action: bins,
            reward: bins,
            rtg: bins,
        }
    }
}

/// Per-channel discretization for states, actions, reward and reward-to-go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `state_dim + action_dim + 2` channels in flattening order.
    pub channels: Vec<Channel>,
}

impl DiscretizerSpec {
    pub fn new(state_dim: usize, action_dim: usize, channels: Vec<Channel>) -> Result<Self> {
        if state_dim == 0 {
            return Err(invalid("state_dim", "must be at least 1"));
        }
        let expected = state_dim + action_dim + 2;
        if channels.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "channels",
                expected,
                got: channels.len(),
            });
        }
        for c in &channels {
            Channel::new(c.bins, c.min, c.max)?;
        }
        Ok(Self {
            state_dim,
            action_dim,
            channels,
        })
    }

    /// Tokens per transition, `K + M + 2`.
    pub fn transition_len(&self) -> usize {
        self.state_dim + self.action_dim + 2
    }

    /// Channel index of an absolute position within a flattened trajectory.
    pub fn channel_index(&self, position: usize) -> usize {
        position % self.transition_len()
    }

    pub fn kind(&self, channel: usize) -> ChannelKind {
        let k = self.state_dim;
        let m = self.action_dim;
        match channel {
            c if c < k => ChannelKind::State(c),
            c if c < k + m => ChannelKind::Action(c - k),
            c if c == k + m => ChannelKind::Reward,
            _ => ChannelKind::RewardToGo,
        }
    }

    pub fn channel(&self, index: usize) -> &Channel {
        &self.channels[index]
    }

    pub fn reward_channel(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn rtg_channel(&self) -> usize {
        self.state_dim + self.action_dim + 1
    }

    pub fn encode_state(&self, state: &[f64]) -> Result<Vec<Token>> {
        self.encode_slice(state, 0, self.state_dim, "state")
    }

    pub fn encode_action(&self, action: &[f64]) -> Result<Vec<Token>> {
        self.encode_slice(action, self.state_dim, self.action_dim, "action")
    }

    pub fn decode_state(&self, tokens: &[Token]) -> Vec<f64> {
        self.decode_slice(tokens, 0)
    }

    pub fn decode_action(&self, tokens: &[Token]) -> Vec<f64> {
        self.decode_slice(tokens, self.state_dim)
    }

    fn encode_slice(
        &self,
        values: &[f64],
        offset: usize,
        dim: usize,
        what: &'static str,
    ) -> Result<Vec<Token>> {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.channels[offset + i].encode(v))
            .collect())
    }

    fn decode_slice(&self, tokens: &[Token], offset: usize) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.channels[offset + i].decode(t))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::new(spec.state_dim, spec.action_dim, spec.channels)
    }
}

/// One real-valued episode as stored in a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check_shape(&self) -> Result<(usize, usize)> {
        let h = self.rewards.len();
        if self.states.len() != h {
            return Err(Error::DimensionMismatch {
                what: "episode states",
                expected: h,
                got: self.states.len(),
            });
        }
        if self.actions.len() != h {
            return Err(Error::DimensionMismatch {
                what: "episode actions",
                expected: h,
                got: self.actions.len(),
            });
        }
        let k = self.states.first().map_or(0, Vec::len);
        let m = self.actions.first().map_or(0, Vec::len);
        for s in &self.states {
            if s.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "state",
                    expected: k,
                    got: s.len(),
                });
            }
        }
        for a in &self.actions {
            if a.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "action",
                    expected: m,
                    got: a.len(),
                });
            }
        }
        Ok((k, m))
    }

    /// Attach discounted reward-to-go to every step.
    pub fn annotate(&self, gamma: f64) -> Result<AnnotatedEpisode> {
        self.check_shape()?;
        let rtg = annotate_rtg(&self.rewards, gamma)?;
        Ok(AnnotatedEpisode {
            states: self.states.clone(),
            actions: self.actions.clone(),
            rewards: self.rewards.clone(),
            rtg,
        })
    }
}

/// An episode with reward-to-go per step.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedEpisode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
}

/// Discounted reward-to-go via `R_t = r_t + gamma * R_{t+1}`, `R_{H+1} = 0`.
pub fn annotate_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("must lie in (0, 1], got {gamma}")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        rtg[t] = acc;
    }
    Ok(rtg)
}

/// Fit uniform per-channel ranges to the observed extrema of a dataset.
///
/// The reward-to-go channel is fitted after annotating each episode with
/// `gamma`. Channels whose values never vary are widened by
/// [`ZERO_WIDTH_EPSILON`] around the observed value.
pub fn fit_discretizer(episodes: &[Episode], bins: BinCounts, gamma: f64) -> Result<DiscretizerSpec> {
    let first = episodes
        .iter()
        .find(|e| !e.is_empty())
        .ok_or(Error::EmptyDataset)?;
    let (k, m) = first.check_shape()?;
    let n_channels = k + m + 2;
    let mut lo = vec![f64::INFINITY; n_channels];
    let mut hi = vec![f64::NEG_INFINITY; n_channels];
    let mut observe = |c: usize, v: f64| -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFinite("dataset"));
        }
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
        Ok(())
    };

    for ep in episodes {
        let (ek, em) = ep.check_shape()?;
        if ep.is_empty() {
            continue;
        }
        if ek != k || em != m {
            return Err(Error::DimensionMismatch {
                what: "episode dimensions",
                expected: k + m,
                got: ek + em,
            });
        }
        let annotated = ep.annotate(gamma)?;
        for t in 0..ep.len() {
            for (i, &v) in annotated.states[t].iter().enumerate() {
                observe(i, v)?;
            }
            for (i, &v) in annotated.actions[t].iter().enumerate() {
                observe(k + i, v)?;
            }
            observe(k + m, annotated.rewards[t])?;
            observe(k + m + 1, annotated.rtg[t])?;
        }
    }

    let channels = (0..n_channels)
        .map(|c| {
            let count = match c {
                c if c < k => bins.state,
                c if c < k + m => bins.action,
                c if c == k + m => bins.reward,
                _ => bins.rtg,
            };
            let (mut min, mut max) = (lo[c], hi[c]);
            if min == max {
                log::warn!("channel {c} has zero width at {min}; widening by {ZERO_WIDTH_EPSILON}");
                min -= ZERO_WIDTH_EPSILON / 2.0;
                max += ZERO_WIDTH_EPSILON / 2.0;
            }
            Channel::new(count, min, max)
        })
        .collect::<Result<Vec<_>>>()?;
    DiscretizerSpec::new(k, m, channels)
}

/// One `(state, action, reward, reward-to-go)` tuple in token form.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedTransition {
    pub state: Vec<Token>,
    pub action: Vec<Token>,
    pub reward: Token,
    pub rtg: Token,
}

impl TokenizedTransition {
    pub fn flatten_into(&self, out: &mut Vec<Token>) {
        out.extend_from_slice(&self.state);
        out.extend_from_slice(&self.action);
        out.push(self.reward);
        out.push(self.rtg);
    }

    pub fn to_tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.state.len() + self.action.len() + 2);
        self.flatten_into(&mut out);
        out
    }

    /// Split exactly one transition worth of tokens.
    pub fn from_tokens(tokens: &[Token], spec: &DiscretizerSpec) -> Result<Self> {
        let len = spec.transition_len();
        if tokens.len() != len {
            return Err(Error::DimensionMismatch {
                what: "transition tokens",
                expected: len,
                got: tokens.len(),
            });
        }
        for (c, &t) in tokens.iter().enumerate() {
            if t >= spec.channels[c].bins {
                return Err(invalid(
                    "token",
                    format!("token {t} out of range for channel {c} with {} bins", spec.channels[c].bins),
                ));
            }
        }
        let k = spec.state_dim;
        let m = spec.action_dim;
        Ok(Self {
            state: tokens[..k].to_vec(),
            action: tokens[k..k + m].to_vec(),
            reward: tokens[k + m],
            rtg: tokens[k + m + 1],
        })
    }
}

/// A sequence of tokenized transitions starting from `origin`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    /// Start-state tokens; equal to the state of the first transition.
    pub origin: Vec<Token>,
    pub transitions: Vec<TokenizedTransition>,
}

impl Trajectory {
    pub fn new(origin: Vec<Token>) -> Self {
        Self {
            origin,
            transitions: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.transitions.len()
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for t in &self.transitions {
            t.flatten_into(&mut out);
        }
        out
    }

    pub fn from_tokens(tokens: &[Token], spec: &DiscretizerSpec) -> Result<Self> {
        let len = spec.transition_len();
        if tokens.is_empty() || tokens.len() % len != 0 {
            return Err(invalid(
                "tokens",
                format!("length {} is not a positive multiple of {len}", tokens.len()),
            ));
        }
        let transitions = tokens
            .chunks(len)
            .map(|c| TokenizedTransition::from_tokens(c, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            origin: transitions[0].state.clone(),
            transitions,
        })
    }

    /// Total tokens, `depth * (K + M + 2)`.
    pub fn token_len(&self) -> usize {
        self.transitions
            .iter()
            .map(|t| t.state.len() + t.action.len() + 2)
            .sum()
    }
}

pub fn tokenize_episode(episode: &AnnotatedEpisode, spec: &DiscretizerSpec) -> Result<Trajectory> {
    let h = episode.rewards.len();
    if h == 0 {
        return Err(Error::EmptyDataset);
    }
    for (what, got) in [
        ("episode states", episode.states.len()),
        ("episode actions", episode.actions.len()),
        ("episode reward-to-go", episode.rtg.len()),
    ] {
        if got != h {
            return Err(Error::DimensionMismatch {
                what,
                expected: h,
                got,
            });
        }
    }
    let reward = spec.channel(spec.reward_channel());
    let rtg = spec.channel(spec.rtg_channel());
    let mut transitions = Vec::with_capacity(h);
    for t in 0..h {
        if !(episode.rewards[t].is_finite() && episode.rtg[t].is_finite()) {
            return Err(Error::NonFinite("episode rewards"));
        }
        transitions.push(TokenizedTransition {
            state: spec.encode_state(&episode.states[t])?,
            action: spec.encode_action(&episode.actions[t])?,
            reward: reward.encode(episode.rewards[t]),
            rtg: rtg.encode(episode.rtg[t]),
        });
    }
    Ok(Trajectory {
        origin: transitions[0].state.clone(),
        transitions,
    })
}

/// Map every token back to its bin midpoint.
pub fn detokenize(trajectory: &Trajectory, spec: &DiscretizerSpec) -> AnnotatedEpisode {
    let reward = spec.channel(spec.reward_channel());
    let rtg = spec.channel(spec.rtg_channel());
    let mut out = AnnotatedEpisode {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        rtg: Vec::new(),
    };
    for t in &trajectory.transitions {
        out.states.push(spec.decode_state(&t.state));
        out.actions.push(spec.decode_action(&t.action));
        out.rewards.push(reward.decode(t.reward));
        out.rtg.push(rtg.decode(t.rtg));
    }
    out
}

/// Read a line-delimited episode file.
pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        ep.check_shape()?;
        episodes.push(ep);
    }
    Ok(episodes)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
