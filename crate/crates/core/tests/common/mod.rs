#![allow(dead_code)]

use pbs_core::decode::BeamCandidate;
use pbs_core::eval::{MomentLedger, StepMoments};
use pbs_core::model::{CategoricalOverBins, SequenceModel};
use pbs_core::tokens::{Channel, DiscretizerSpec, Token, TokenizedTransition, Trajectory};
use pbs_core::Result;
use rand::Rng;

/// A hand-written model: `dist(channel, context)` returns raw probabilities.
pub struct FnModel<F> {
    pub spec: DiscretizerSpec,
    pub window: usize,
    pub dist: F,
}

impl<F> SequenceModel for FnModel<F>
where
    F: Fn(usize, &[Token]) -> Vec<f64> + Sync,
{
    fn spec(&self) -> &DiscretizerSpec {
        &self.spec
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn next_token_dist(&self, context: &[Token], temperature: f64) -> Result<CategoricalOverBins> {
        let channel = self.spec.channel_index(context.len());
        let probs = (self.dist)(channel, context);
        CategoricalOverBins::new(probs, self.spec.channel(channel).bin_values())?.with_temperature(temperature)
    }
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// K = M = 1 spec with integer-midpoint bins `0..bins` on every channel.
pub fn integer_spec(state: u32, action: u32, reward: u32, rtg: u32) -> DiscretizerSpec {
    let ch = |bins: u32| Channel::new(bins, -0.5, bins as f64 - 0.5).unwrap();
    DiscretizerSpec::new(1, 1, vec![ch(state), ch(action), ch(reward), ch(rtg)]).unwrap()
}

pub fn random_ledger<R: Rng>(rng: &mut R, depth: usize) -> MomentLedger {
    let steps = (0..depth)
        .map(|_| StepMoments {
            reward_mean: rng.random_range(-5.0..5.0),
            reward_var: rng.random_range(0.0..2.0),
            rtg_mean: rng.random_range(-20.0..20.0),
            rtg_var: rng.random_range(0.0..10.0),
        })
        .collect();
    MomentLedger::from_steps(steps).unwrap()
}

/// A candidate with the given ledger and a random K = M = 1 token path over `vocab` symbols.
pub fn synthetic_candidate<R: Rng>(rng: &mut R, ledger: MomentLedger, vocab: u32, id: u64) -> BeamCandidate {
    let depth = ledger.depth();
    let transitions = (0..depth)
        .map(|_| TokenizedTransition {
            state: vec![rng.random_range(0..vocab)],
            action: vec![rng.random_range(0..vocab)],
            reward: rng.random_range(0..vocab),
            rtg: rng.random_range(0..vocab),
        })
        .collect::<Vec<_>>();
    BeamCandidate {
        trajectory: Trajectory {
            origin: transitions.first().map_or(vec![0], |t| t.state.clone()),
            transitions,
        },
        ledger,
        cumulative_log_prob: 0.0,
        parent_index: Some(0),
        multiplicity: 1,
        rng_stream_id: id,
    }
}
