//! Autoregressive next-token model boundary and the count-based reference model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokens::{DiscretizerSpec, Token, TokenizedTransition, Trajectory};

/// Probabilities over the bins of one channel, paired with the bin values.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalOverBins {
    probs: Vec<f64>,
    values: Vec<f64>,
}

impl CategoricalOverBins {
    pub fn new(probs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("probs", "empty vocabulary"));
        }
        if probs.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "bin values",
                expected: probs.len(),
                got: values.len(),
            });
        }
        if probs.iter().chain(&values).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("categorical"));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(invalid("probs", "negative probability"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("probs", format!("sum to {total}, not 1")));
        }
        Ok(Self { probs, values })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Rescale log-probabilities by `1 / temperature` and renormalize.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid("temperature", format!("must be positive, got {temperature}")));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let logits: Vec<f64> = self.probs.iter().map(|p| p.ln() / temperature).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        Ok(Self {
            probs: exp.into_iter().map(|e| e / z).collect(),
            values: self.values.clone(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        let index = WeightedIndex::new(&self.probs).expect("validated distribution");
        index.sample(rng) as Token
    }

    /// Most probable token; lowest index on ties.
    pub fn mode(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as Token
    }
}

/// The `P_theta` boundary: a next-token distribution over flattened trajectory tokens.
///
/// The channel of the next token is `context.len() % (K + M + 2)`.
/// Implementations must be deterministic and callable from many threads.
pub trait SequenceModel: Sync {
    fn spec(&self) -> &DiscretizerSpec;

    /// Maximum number of trailing context tokens consumed.
    fn context_window(&self) -> usize;

    fn next_token_dist(&self, context: &[Token], temperature: f64) -> Result<CategoricalOverBins>;
}

/// Laplace-smoothed n-gram counts over flattened trajectory tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CountModel {
    spec: DiscretizerSpec,
    window: usize,
    lambda: f64,
    /// One table per channel, keyed by the trailing context (at most `window` tokens).
    tables: Vec<HashMap<Vec<Token>, Vec<u64>>>,
}

pub fn train_count_model(
    dataset: &[Trajectory],
    spec: &DiscretizerSpec,
    window: usize,
    lambda: f64,
) -> Result<CountModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if window == 0 {
        return Err(invalid("window", "must be at least 1"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let longest = dataset.iter().map(Trajectory::token_len).max().unwrap_or(0);
    if window > longest {
        return Err(invalid(
            "window",
            format!("{window} exceeds the longest trajectory ({longest} tokens)"),
        ));
    }
    let len = spec.transition_len();
    let mut tables: Vec<HashMap<Vec<Token>, Vec<u64>>> = vec![HashMap::new(); len];
    for traj in dataset {
        let tokens = traj.tokens();
        for (i, &tok) in tokens.iter().enumerate() {
            let channel = i % len;
            let bins = spec.channels[channel].bins;
            if tok >= bins {
                return Err(invalid("token", format!("{tok} out of range for channel {channel}")));
            }
            let key = tokens[i.saturating_sub(window)..i].to_vec();
            let counts = tables[channel]
                .entry(key)
                .or_insert_with(|| vec![0; bins as usize]);
            counts[tok as usize] += 1;
        }
    }
    Ok(CountModel {
        spec: spec.clone(),
        window,
        lambda,
        tables,
    })
}

impl CountModel {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Raw counts for the context, if it was observed during training.
    pub fn counts(&self, context: &[Token]) -> Option<&[u64]> {
        let channel = self.spec.channel_index(context.len());
        let key = &context[context.len().saturating_sub(self.window)..];
        self.tables[channel].get(key).map(Vec::as_slice)
    }

    pub fn num_contexts(&self) -> usize {
        self.tables.iter().map(HashMap::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_document())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_document(doc)
    }

    fn to_document(&self) -> ModelDocument {
        let mut entries: Vec<CountEntry> = self
            .tables
            .iter()
            .enumerate()
            .flat_map(|(channel, table)| {
                table.iter().map(move |(context, counts)| CountEntry {
                    channel,
                    context: context.clone(),
                    counts: counts.clone(),
                })
            })
            .collect();
        entries.sort_by(|a, b| (a.channel, &a.context).cmp(&(b.channel, &b.context)));
        ModelDocument {
            state_dim: self.spec.state_dim,
            action_dim: self.spec.action_dim,
            bins: self.spec.channels.iter().map(|c| c.bins).collect(),
            window: self.window,
            lambda: self.lambda,
            discretizer: self.spec.clone(),
            entries,
        }
    }

    fn from_document(doc: ModelDocument) -> Result<Self> {
        let spec = DiscretizerSpec::new(
            doc.discretizer.state_dim,
            doc.discretizer.action_dim,
            doc.discretizer.channels,
        )?;
        let bins: Vec<u32> = spec.channels.iter().map(|c| c.bins).collect();
        if doc.state_dim != spec.state_dim || doc.action_dim != spec.action_dim || doc.bins != bins {
            return Err(Error::Format("model metadata disagrees with its discretizer".into()));
        }
        if doc.window == 0 || !(doc.lambda > 0.0) {
            return Err(Error::Format("model window and lambda must be positive".into()));
        }
        let mut tables = vec![HashMap::new(); spec.transition_len()];
        for e in doc.entries {
            if e.channel >= tables.len() || e.counts.len() != bins[e.channel] as usize {
                return Err(Error::Format(format!("bad count entry for channel {}", e.channel)));
            }
            tables[e.channel].insert(e.context, e.counts);
        }
        Ok(Self {
            spec,
            window: doc.window,
            lambda: doc.lambda,
            tables,
        })
    }
}

impl SequenceModel for CountModel {
    fn spec(&self) -> &DiscretizerSpec {
        &self.spec
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn next_token_dist(&self, context: &[Token], temperature: f64) -> Result<CategoricalOverBins> {
        let channel = self.spec.channel_index(context.len());
        let ch = self.spec.channel(channel);
        let v = ch.bins as usize;
        let probs = match self.counts(context) {
            Some(counts) => {
                let total: u64 = counts.iter().sum();
                let z = total as f64 + self.lambda * v as f64;
                counts.iter().map(|&c| (c as f64 + self.lambda) / z).collect()
            }
            None => vec![1.0 / v as f64; v],
        };
        CategoricalOverBins::new(probs, ch.bin_values())?.with_temperature(temperature)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    state_dim: usize,
    action_dim: usize,
    bins: Vec<u32>,
    window: usize,
    lambda: f64,
    discretizer: DiscretizerSpec,
    entries: Vec<CountEntry>,
}

#[derive(Serialize, Deserialize)]
struct CountEntry {
    channel: usize,
    context: Vec<Token>,
    counts: Vec<u64>,
}

/// A sampled transition with the reward and reward-to-go distributions seen while sampling it.
#[derive(Debug, Clone)]
pub struct SampledTransition {
    pub transition: TokenizedTransition,
    pub reward_dist: CategoricalOverBins,
    pub rtg_dist: CategoricalOverBins,
    /// Sum of log-probabilities of the sampled (not context-supplied) tokens.
    pub log_prob: f64,
}

/// Complete one transition autoregressively after `context`.
///
/// If the context ends inside a transition (for example right after the
/// start-state tokens), the tokens already present are carried over and
/// only the remaining channels are sampled.
pub fn sample_transition<M, R>(
    model: &M,
    context: &[Token],
    temperature: f64,
    rng: &mut R,
) -> Result<SampledTransition>
where
    M: SequenceModel + ?Sized,
    R: Rng + ?Sized,
{
    let spec = model.spec();
    let len = spec.transition_len();
    let offset = context.len() % len;
    let mut ctx: Vec<Token> = context.to_vec();
    let mut reward_dist = None;
    let mut rtg_dist = None;
    let mut log_prob = 0.0;
    for channel in offset..len {
        let dist = model.next_token_dist(&ctx, temperature)?;
        let tok = dist.sample(rng);
        log_prob += dist.probs()[tok as usize].ln();
        ctx.push(tok);
        if channel == spec.reward_channel() {
            reward_dist = Some(dist);
        } else if channel == spec.rtg_channel() {
            rtg_dist = Some(dist);
        }
    }
    let tokens = &ctx[ctx.len() - len..];
    let transition = TokenizedTransition::from_tokens(tokens, spec)?;
    // A context ending after the reward channel is not a valid start.
    let (reward_dist, rtg_dist) = match (reward_dist, rtg_dist) {
        (Some(r), Some(g)) => (r, g),
        _ => {
            return Err(invalid(
                "context",
                format!("context ends at channel {offset}, past the reward channel"),
            ))
        }
    };
    Ok(SampledTransition {
        transition,
        reward_dist,
        rtg_dist,
        log_prob,
    })
}

/// Mean per-token log-likelihood of `dataset` under `model`.
pub fn mean_log_likelihood<M: SequenceModel + ?Sized>(model: &M, dataset: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for traj in dataset {
        let tokens = traj.tokens();
        for i in 0..tokens.len() {
            let dist = model.next_token_dist(&tokens[..i], 1.0)?;
            let p = dist
                .probs()
                .get(tokens[i] as usize)
                .copied()
                .ok_or_else(|| invalid("token", format!("{} outside vocabulary", tokens[i])))?;
            total += p.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / n as f64)
}

/// Mean per-token log-likelihood of a model that is uniform on every channel.
pub fn uniform_log_likelihood(spec: &DiscretizerSpec, dataset: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for traj in dataset {
        for i in 0..traj.token_len() {
            total -= (spec.channel(spec.channel_index(i)).bins as f64).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::substream;
    use crate::tokens::Channel;
    use approx::assert_abs_diff_eq;

    fn unit_spec(bins: u32) -> DiscretizerSpec {
        let c = Channel::new(bins, 0.0, bins as f64).unwrap();
        DiscretizerSpec::new(1, 1, vec![c; 4]).unwrap()
    }

    fn traj(spec: &DiscretizerSpec, tokens: &[Token]) -> Trajectory {
        Trajectory::from_tokens(tokens, spec).unwrap()
    }

    #[test]
    fn temperature_examples() {
        let even = CategoricalOverBins::new(vec![0.5, 0.5], vec![0.0, 1.0]).unwrap();
        for t in [0.1, 1.0, 3.0] {
            let d = even.with_temperature(t).unwrap();
            assert_abs_diff_eq!(d.probs()[0], 0.5, epsilon = 1e-12);
        }
        let skew = CategoricalOverBins::new(vec![0.8, 0.2], vec![0.0, 1.0]).unwrap();
        let hot = skew.with_temperature(2.0).unwrap();
        let (a, b) = (0.8f64.sqrt(), 0.2f64.sqrt());
        assert_abs_diff_eq!(hot.probs()[0], a / (a + b), epsilon = 1e-12);
        assert_abs_diff_eq!(hot.probs()[0], 2.0 / 3.0, epsilon = 1e-4);
        let cold = skew.with_temperature(0.01).unwrap();
        assert!(cold.probs()[0] > 1.0 - 1e-12);
        assert!(skew.with_temperature(0.0).is_err());
    }

    #[test]
    fn empty_vocabulary_is_an_error() {
        assert!(CategoricalOverBins::new(vec![], vec![]).is_err());
    }

    #[test]
    fn laplace_counts_for_repeated_sequence() {
        let spec = unit_spec(3);
        let lambda = 1.0;
        let data = vec![traj(&spec, &[0, 1, 2, 0]); 5];
        let model = train_count_model(&data, &spec, 1, lambda).unwrap();
        // after token 0 at position 0 the successor is always 1 (c = 5).
        let d = model.next_token_dist(&[0], 1.0).unwrap();
        assert_abs_diff_eq!(d.probs()[1], (5.0 + lambda) / (5.0 + 3.0 * lambda), epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[0], lambda / (5.0 + 3.0 * lambda), epsilon = 1e-12);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let spec = unit_spec(4);
        let data = vec![traj(&spec, &[0, 1, 2, 3])];
        let model = train_count_model(&data, &spec, 2, 0.5).unwrap();
        let d = model.next_token_dist(&[3, 3], 1.0).unwrap();
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn window_longer_than_data_is_rejected() {
        let spec = unit_spec(4);
        let data = vec![traj(&spec, &[0, 1, 2, 3])];
        assert!(train_count_model(&data, &spec, 5, 1.0).is_err());
        assert!(train_count_model(&data, &spec, 0, 1.0).is_err());
        assert!(train_count_model(&[], &spec, 1, 1.0).is_err());
    }

    #[test]
    fn one_hot_model_samples_the_unique_transition() {
        let spec = unit_spec(3);
        let data = vec![traj(&spec, &[1, 2, 0, 1, 1, 2, 0, 1])];
        // Tiny lambda makes the model effectively deterministic.
        let model = train_count_model(&data, &spec, 4, 1e-12).unwrap();
        let mut rng = substream(1, &[]);
        let s = sample_transition(&model, &[1], 1.0, &mut rng).unwrap();
        assert_eq!(s.transition.to_tokens(), vec![1, 2, 0, 1]);
        assert!(s.reward_dist.probs()[0] > 1.0 - 1e-9);
        assert!(s.log_prob <= 0.0 && s.log_prob > -1e-9);
    }

    #[test]
    fn context_past_reward_channel_is_rejected() {
        let spec = unit_spec(3);
        let data = vec![traj(&spec, &[1, 2, 0, 1])];
        let model = train_count_model(&data, &spec, 2, 1.0).unwrap();
        let mut rng = substream(1, &[]);
        assert!(sample_transition(&model, &[1, 2, 0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn log_likelihood_beats_uniform_on_training_data() {
        let spec = unit_spec(4);
        let data = vec![traj(&spec, &[0, 1, 2, 3, 1, 1, 2, 2]), traj(&spec, &[0, 1, 3, 3])];
        let model = train_count_model(&data, &spec, 4, 1.0).unwrap();
        let ll = mean_log_likelihood(&model, &data).unwrap();
        let uniform = uniform_log_likelihood(&spec, &data).unwrap();
        assert!(ll >= uniform);
        assert_abs_diff_eq!(uniform, -(4.0f64).ln(), epsilon = 1e-12);
    }
}
