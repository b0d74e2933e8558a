use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbs_core::env::{
    expected_return, generate_id_dataset, rollout, BehaviorPolicy, PolicyController, RiskyChainSpec, TabularMdp,
};

fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / z).collect();
    // Absorb rounding so the row sums to 1 within the validation tolerance.
    let rest: f64 = row[1..].iter().sum();
    row[0] = 1.0 - rest;
    row
}

fn random_mdp(seed: u64, n: usize, m: usize, horizon: usize) -> (TabularMdp, BehaviorPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp {
        transitions: (0..n).map(|_| (0..m).map(|_| random_row(&mut rng, n)).collect()).collect(),
        rewards: (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..2.0)).collect()).collect(),
        rho0: random_row(&mut rng, n),
        horizon,
        state_features: (0..n).map(|s| vec![s as f64]).collect(),
        action_features: (0..m).map(|a| vec![a as f64]).collect(),
    };
    let policy = BehaviorPolicy::new((0..n).map(|_| random_row(&mut rng, m)).collect()).unwrap();
    (mdp, policy)
}

#[test]
fn exact_value_matches_monte_carlo_on_a_random_mdp() {
    let (mdp, policy) = random_mdp(21, 5, 3, 6);
    for gamma in [1.0, 0.9] {
        let exact = expected_return(&mdp, &policy, gamma).unwrap();
        let n = 100_000;
        let returns: Vec<f64> = generate_id_dataset(&mdp, &policy, n, 5)
            .unwrap()
            .into_iter()
            .map(|(_, rewards)| rewards.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum())
            .collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "gamma {gamma}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn transition_frequencies_match_the_table() {
    let (mdp, policy) = random_mdp(22, 4, 2, 5);
    let data = generate_id_dataset(&mdp, &policy, 10_000, 6).unwrap();
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut counts = vec![vec![vec![0usize; n]; m]; n];
    for (ep, _) in &data {
        for t in 0..ep.states.len() - 1 {
            counts[ep.states[t]][ep.actions[t]][ep.states[t + 1]] += 1;
        }
    }
    for s in 0..n {
        for a in 0..m {
            let total: usize = counts[s][a].iter().sum();
            assert!(total > 100, "({s}, {a}) visited only {total} times");
            for s2 in 0..n {
                let p = mdp.transitions[s][a][s2];
                let se = (p * (1.0 - p) / total as f64).sqrt();
                let f = counts[s][a][s2] as f64 / total as f64;
                assert!((f - p).abs() <= 3.0 * se, "P({s2} | {s}, {a}) = {p}, observed {f}");
            }
        }
    }
}

#[test]
fn behavior_enters_the_risky_corridor_at_the_coverage_rate() {
    let spec = RiskyChainSpec::default();
    let chain = spec.build().unwrap();
    let n = 10_000;
    let data = generate_id_dataset(&chain.mdp, &chain.behavior, n, 8).unwrap();
    let entered = data.iter().filter(|(ep, _)| chain.entered_risky(ep)).count();
    let p = spec.data_coverage;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let f = entered as f64 / n as f64;
    assert!((f - p).abs() <= 3.0 * se, "{f} vs {p}");
}

#[test]
fn rollouts_are_reproducible() {
    let (mdp, policy) = random_mdp(23, 5, 2, 8);
    let seeds: Vec<u64> = (0..50).collect();
    let run = || rollout(&mdp, |s| PolicyController::new(&mdp, &policy, s), &seeds).unwrap();
    let a = run();
    assert_eq!(a, run());
    let returns: Vec<f64> = a.iter().map(|o| o.total_return).collect();
    assert!(returns.iter().any(|&r| r != returns[0]));
}

#[test]
fn rollout_returns_agree_with_the_exact_value() {
    let (mdp, policy) = random_mdp(24, 5, 2, 4);
    let exact = expected_return(&mdp, &policy, 1.0).unwrap();
    let seeds: Vec<u64> = (0..20_000).collect();
    let returns: Vec<f64> = rollout(&mdp, |s| PolicyController::new(&mdp, &policy, s), &seeds)
        .unwrap()
        .iter()
        .map(|o| o.total_return)
        .collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - exact).abs() <= 3.0 * (var / n).sqrt(), "{mean} vs {exact}");
}

#[test]
fn document_round_trip() {
    let (mdp, _) = random_mdp(25, 3, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mdp.json");
    mdp.save(&path).unwrap();
    assert_eq!(TabularMdp::load(&path).unwrap(), mdp);
}
