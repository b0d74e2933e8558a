mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbs_core::decode::{
    decode, plan_action, prune_pbs, prune_top_b, score_pbs, score_reward_greedy, BeamCandidate, DecoderConfig, Strategy,
};
use pbs_core::env::{generate_dataset, RiskyChainLayout, RiskyChainSpec};
use pbs_core::model::{sample_transition, train_count_model, CountModel, SequenceModel};
use pbs_core::seeds::substream;
use pbs_core::tokens::{fit_discretizer, tokenize_episode, BinCounts, Token, Trajectory};

use common::{integer_spec, one_hot, random_ledger, synthetic_candidate, FnModel};

const STRATEGIES: [Strategy; 3] = [Strategy::Pbs, Strategy::RewardGreedy, Strategy::Likelihood];

fn config(strategy: Strategy, b: usize, e: usize, h: usize, seed: u64) -> DecoderConfig {
    DecoderConfig {
        beam_width: b,
        expansion_factor: e,
        horizon: h,
        strategy,
        seed,
        ..DecoderConfig::paper_default()
    }
}

/// A stochastic count model over K = M = 1 tokens with 3 bins per channel.
fn random_count_model(seed: u64, lambda: f64) -> CountModel {
    let spec = integer_spec(3, 3, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Trajectory> = (0..30)
        .map(|_| {
            let tokens: Vec<Token> = (0..4 * 4).map(|_| rng.random_range(0..3)).collect();
            Trajectory::from_tokens(&tokens, &spec).unwrap()
        })
        .collect();
    train_count_model(&data, &spec, 4, lambda).unwrap()
}

#[test]
fn single_slot_beam_is_ancestral_sampling() {
    let model = random_count_model(1, 0.5);
    for strategy in STRATEGIES {
        for seed in 0..20 {
            let cfg = config(strategy, 1, 1, 4, seed);
            let out = decode(&model, &[2], &cfg, false).unwrap();
            assert_eq!(out.beam.len(), 1);

            let mut context: Vec<Token> = vec![2];
            let mut expected = Vec::new();
            for step in 1..=4u64 {
                let mut rng = substream(seed, &[step, 0, 0]);
                let t = sample_transition(&model, &context, 1.0, &mut rng).unwrap();
                if step == 1 {
                    context.clear();
                }
                t.transition.flatten_into(&mut context);
                expected.push(t.transition);
            }
            assert_eq!(out.beam[0].trajectory.transitions, expected, "{strategy} seed {seed}");
        }
    }
}

// Three-state chain: action 1 moves one state right (saturating), action 0 stays.
const REWARD: [[u32; 2]; 3] = [[1, 0], [2, 1], [0, 0]];
const RTG: [[u32; 2]; 3] = [[2, 5], [7, 3], [1, 1]];

fn chain_model() -> FnModel<impl Fn(usize, &[Token]) -> Vec<f64> + Sync> {
    FnModel {
        spec: integer_spec(3, 2, 4, 8),
        window: 64,
        dist: |channel: usize, ctx: &[Token]| {
            let n = ctx.len();
            match channel {
                0 => {
                    let (s, a) = (ctx[n - 4] as usize, ctx[n - 3] as usize);
                    one_hot(3, (s + a).min(2))
                }
                1 => vec![0.5, 0.5],
                2 => one_hot(4, REWARD[ctx[n - 2] as usize][ctx[n - 1] as usize] as usize),
                _ => one_hot(8, RTG[ctx[n - 3] as usize][ctx[n - 2] as usize] as usize),
            }
        },
    }
}

/// Every two-step action sequence from state 0, best expected return first.
fn enumerate_chain(gamma: f64) -> Vec<(Vec<usize>, f64)> {
    let mut all = Vec::new();
    for a0 in 0..2 {
        for a1 in 0..2 {
            let s1 = a0;
            let value = gamma * REWARD[0][a0] as f64 + gamma * gamma * RTG[s1][a1] as f64;
            all.push((vec![a0, a1], value));
        }
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    all
}

#[test]
fn greedy_matches_exhaustive_enumeration_on_a_chain() {
    let model = chain_model();
    let gamma = 0.99;
    let oracle = enumerate_chain(gamma);
    let mut covered = 0;
    for seed in 0..200 {
        let cfg = DecoderConfig {
            gamma,
            ..config(Strategy::RewardGreedy, 2, 2, 2, seed)
        };
        let out = decode(&model, &[0], &cfg, true).unwrap();
        // Only runs whose samples reached every branch are comparable to enumeration.
        if out.trace[0].candidates.len() < 2 || out.trace[1].candidates.len() < 4 {
            continue;
        }
        covered += 1;
        for (k, c) in out.beam.iter().enumerate() {
            let actions: Vec<usize> = c.trajectory.transitions.iter().map(|t| t.action[0] as usize).collect();
            assert_eq!(actions, oracle[k].0, "seed {seed}");
            assert!((out.scores[k] - oracle[k].1).abs() < 1e-12);
        }
    }
    assert!(covered >= 20, "only {covered} fully covered runs");
}

fn eq3(c: &BeamCandidate, gamma: f64) -> f64 {
    let steps = c.ledger.steps();
    let d = steps.len();
    let mut v = gamma.powi(d as i32) * steps[d - 1].rtg_mean;
    for (t, s) in steps[..d - 1].iter().enumerate() {
        v += gamma.powi(t as i32 + 1) * s.reward_mean;
    }
    v
}

#[test]
fn greedy_scores_are_per_candidate_expected_returns() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DecoderConfig::paper_default();
    for _ in 0..50 {
        let depth = rng.random_range(1..5);
        let candidates: Vec<BeamCandidate> = (0..rng.random_range(1..10))
            .map(|i| {
                let l = random_ledger(&mut rng, depth);
                synthetic_candidate(&mut rng, l, 3, i)
            })
            .collect();
        let scores = score_reward_greedy(&candidates, &cfg).unwrap();
        for (c, s) in candidates.iter().zip(&scores.values) {
            assert!((s - eq3(c, cfg.gamma)).abs() < 1e-9 * s.abs().max(1.0));
        }
    }
}

#[test]
fn likelihood_scores_replay_to_the_token_log_probs() {
    let model = random_count_model(2, 0.3);
    for seed in 0..10 {
        let cfg = config(Strategy::Likelihood, 4, 2, 3, seed);
        let out = decode(&model, &[1], &cfg, false).unwrap();
        for (c, &score) in out.beam.iter().zip(&out.scores) {
            let tokens = c.trajectory.tokens();
            // The first state is given, not sampled.
            let replay: f64 = (1..tokens.len())
                .map(|i| model.next_token_dist(&tokens[..i], 1.0).unwrap().probs()[tokens[i] as usize].ln())
                .sum();
            assert!((c.cumulative_log_prob - replay).abs() < 1e-9);
            assert_eq!(score, c.cumulative_log_prob);
        }
    }
}

fn blank_candidates(n: usize) -> Vec<BeamCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|i| {
            let l = random_ledger(&mut rng, 1);
            synthetic_candidate(&mut rng, l, 3, i as u64)
        })
        .collect()
}

#[test]
fn uniform_weights_retain_each_candidate_at_the_multinomial_rate() {
    let b = 4;
    let trials = 10_000;
    let weights = vec![1.0 / b as f64; b];
    let mut retained = vec![0usize; b];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..trials {
        for k in prune_pbs(blank_candidates(b), &weights, b, &mut rng).unwrap() {
            retained[k.candidate.rng_stream_id as usize] += 1;
        }
    }
    let p = 1.0 - (1.0 - 1.0 / b as f64).powi(b as i32);
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    for (i, &r) in retained.iter().enumerate() {
        let f = r as f64 / trials as f64;
        assert!((f - p).abs() <= 3.0 * se, "candidate {i}: {f} vs {p}");
    }
}

#[test]
fn single_slot_prune_draws_by_weight() {
    let weights = [0.2, 0.3, 0.5];
    let trials = 10_000;
    let mut hits = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..trials {
        let kept = prune_pbs(blank_candidates(3), &weights, 1, &mut rng).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].candidate.multiplicity, 1);
        hits[kept[0].candidate.rng_stream_id as usize] += 1;
    }
    for (i, &w) in weights.iter().enumerate() {
        let se = (w * (1.0 - w) / trials as f64).sqrt();
        assert!((hits[i] as f64 / trials as f64 - w).abs() <= 3.0 * se);
    }
}

#[test]
fn risk_neutral_pbs_ranks_like_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DecoderConfig {
        delta: 0.0,
        alpha: 0.0,
        ..DecoderConfig::paper_default()
    };
    for _ in 0..100 {
        let n = rng.random_range(2..12);
        let depth = rng.random_range(1..4);
        let candidates: Vec<BeamCandidate> = (0..n)
            .map(|i| {
                let l = random_ledger(&mut rng, depth);
                synthetic_candidate(&mut rng, l, 2, i as u64)
            })
            .collect();
        let order = |scores| -> Vec<u64> {
            prune_top_b(candidates.clone(), &scores, n)
                .into_iter()
                .map(|k| k.candidate.rng_stream_id)
                .collect()
        };
        let pbs = order(score_pbs(&candidates, &cfg).unwrap());
        let greedy = order(score_reward_greedy(&candidates, &cfg).unwrap());
        assert_eq!(pbs, greedy);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn beam_never_exceeds_its_width(
        b in 1usize..8,
        e in 1usize..4,
        h in 1usize..5,
        seed in any::<u64>(),
        s in 0usize..3,
        model_seed in 0u64..5,
    ) {
        let model = random_count_model(model_seed, 1.0);
        let cfg = config(STRATEGIES[s], b, e, h, seed);
        let out = decode(&model, &[0], &cfg, true).unwrap();
        prop_assert!(out.beam.len() <= b);
        prop_assert_eq!(out.widths.len(), h);
        prop_assert!(out.widths.iter().all(|&w| (1..=b).contains(&w)));
        for step in &out.trace {
            prop_assert!(step.kept.len() <= b);
            prop_assert!(step.kept.iter().map(|k| k.1).sum::<usize>() <= b);
        }
    }

    #[test]
    fn decoding_is_deterministic(seed in any::<u64>(), s in 0usize..3, h in 1usize..4) {
        let model = random_count_model(3, 0.5);
        let cfg = config(STRATEGIES[s], 4, 2, h, seed);
        let a = decode(&model, &[1], &cfg, true).unwrap();
        let b = decode(&model, &[1], &cfg, true).unwrap();
        prop_assert_eq!(a.beam, b.beam);
        prop_assert_eq!(a.scores, b.scores);
        prop_assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn first_action_is_repeatable_under_a_fixed_seed() {
    let model = random_count_model(4, 0.5);
    let cfg = config(Strategy::Pbs, 4, 2, 3, 77);
    let a = plan_action(&model, &[], &[1.0], &cfg, false).unwrap();
    for _ in 0..5 {
        assert_eq!(plan_action(&model, &[], &[1.0], &cfg, false).unwrap().action, a.action);
    }
}

/// PBS avoids the risky corridor that reward-greedy chases.
#[test]
fn risky_chain_first_actions() {
    let spec = RiskyChainSpec::default();
    let chain = spec.build().unwrap();
    let gamma = 0.99;
    let episodes = generate_dataset(&chain.mdp, &chain.behavior, 200, 7).unwrap();
    let bins = BinCounts {
        state: 8,
        action: 2,
        reward: 16,
        rtg: 16,
    };
    let disc = fit_discretizer(&episodes, bins, gamma).unwrap();
    let data: Vec<Trajectory> = episodes
        .iter()
        .map(|e| tokenize_episode(&e.annotate(gamma).unwrap(), &disc).unwrap())
        .collect();
    let model = train_count_model(&data, &disc, disc.transition_len(), 0.1).unwrap();
    let start = &chain.mdp.state_features[RiskyChainLayout::START];

    let runs = 200;
    let mut safe = [0usize; 2];
    for (k, strategy) in [Strategy::Pbs, Strategy::RewardGreedy].into_iter().enumerate() {
        for seed in 0..runs {
            let cfg = DecoderConfig {
                beam_width: 16,
                temperature: 1.5,
                strategy,
                seed,
                ..DecoderConfig::paper_default()
            };
            let planned = plan_action(&model, &[], start, &cfg, false).unwrap();
            if chain.mdp.nearest_action(&planned.action).unwrap() == 0 {
                safe[k] += 1;
            }
        }
    }
    let runs = runs as usize;
    assert!(safe[0] * 10 >= runs * 9, "pbs chose the safe corridor {} / {runs}", safe[0]);
    assert!((runs - safe[1]) * 10 >= runs * 9, "greedy chose the risky corridor {} / {runs}", runs - safe[1]);
}

#[test]
fn distinct_children_per_parent() {
    let model = random_count_model(5, 1.0);
    let out = decode(&model, &[0], &config(Strategy::RewardGreedy, 6, 3, 2, 1), true).unwrap();
    for step in &out.trace {
        let unique: HashSet<&Vec<Token>> = step.candidates.iter().collect();
        assert_eq!(unique.len(), step.candidates.len());
    }
}
