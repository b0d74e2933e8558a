//! Scoring mathematics for candidate trajectories.
//!
//! Each candidate carries a [`MomentLedger`] with the mean and variance of
//! the reward and reward-to-go distributions observed at every step. From
//! it we derive a discounted trajectory mean, an inverse-discounted
//! variance, and, across candidates, a covariance `U * S * U` whose
//! similarity matrix `S` counts shared beam-tree edges.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::CategoricalOverBins;
use crate::tokens::Token;

/// `(E[v], Var[v])` of a categorical over bin values.
pub fn dist_moments(dist: &CategoricalOverBins) -> (f64, f64) {
    let mean: f64 = dist.probs().iter().zip(dist.values()).map(|(p, v)| p * v).sum();
    let var: f64 = dist
        .probs()
        .iter()
        .zip(dist.values())
        .map(|(p, v)| p * (v - mean) * (v - mean))
        .sum();
    (mean, var.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMoments {
    pub reward_mean: f64,
    pub reward_var: f64,
    pub rtg_mean: f64,
    pub rtg_var: f64,
}

/// Per-step reward and reward-to-go moments of one candidate.
///
/// Steps before the last contribute their reward moments; the last step
/// contributes its reward-to-go moments.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MomentLedger {
    steps: Vec<StepMoments>,
}

impl MomentLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_steps(steps: Vec<StepMoments>) -> Result<Self> {
        if steps
            .iter()
            .any(|s| s.reward_var < 0.0 || s.rtg_var < 0.0)
        {
            return Err(invalid("ledger", "negative variance"));
        }
        if steps.iter().any(|s| {
            ![s.reward_mean, s.reward_var, s.rtg_mean, s.rtg_var]
                .iter()
                .all(|v| v.is_finite())
        }) {
            return Err(Error::NonFinite("ledger"));
        }
        Ok(Self { steps })
    }

    pub fn push(&mut self, reward: &CategoricalOverBins, rtg: &CategoricalOverBins) {
        let (reward_mean, reward_var) = dist_moments(reward);
        let (rtg_mean, rtg_var) = dist_moments(rtg);
        self.steps.push(StepMoments {
            reward_mean,
            reward_var,
            rtg_mean,
            rtg_var,
        });
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[StepMoments] {
        &self.steps
    }

    /// Reward-to-go moments of the final step.
    pub fn last(&self) -> Option<&StepMoments> {
        self.steps.last()
    }
}

fn check_ledger(ledger: &MomentLedger, gamma: f64) -> Result<()> {
    if ledger.depth() == 0 {
        return Err(invalid("ledger", "depth must be at least 1"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// `sum_{t<d} gamma^t E[r_t] + gamma^d E[R_d]` for a depth-`d` ledger.
pub fn trajectory_mean(ledger: &MomentLedger, gamma: f64) -> Result<f64> {
    check_ledger(ledger, gamma)?;
    let d = ledger.depth();
    let steps = ledger.steps();
    let mut mu = 0.0;
    let mut discount = 1.0;
    for s in &steps[..d - 1] {
        discount *= gamma;
        mu += discount * s.reward_mean;
    }
    discount *= gamma;
    Ok(mu + discount * steps[d - 1].rtg_mean)
}

/// `sum_{t<d} gamma^{-2t} Var[r_t] + gamma^{-2d} Var[R_d]` for a depth-`d` ledger.
pub fn trajectory_variance(ledger: &MomentLedger, gamma: f64) -> Result<f64> {
    check_ledger(ledger, gamma)?;
    let d = ledger.depth();
    let steps = ledger.steps();
    let inflate = 1.0 / (gamma * gamma);
    let mut var = 0.0;
    let mut factor = 1.0;
    for s in &steps[..d - 1] {
        factor *= inflate;
        var += factor * s.reward_var;
    }
    factor *= inflate;
    Ok(var + factor * steps[d - 1].rtg_var)
}

/// Fraction of beam-tree edges shared by two equal-length token paths.
///
/// Tokens are the nodes of the beam tree, so a path of `L` tokens has
/// `L - 1` edges and two paths share `lcp - 1` of them, where `lcp` is the
/// length of their common prefix.
pub fn smc_similarity(a: &[Token], b: &[Token]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let lcp = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    if lcp == a.len() {
        return Ok(1.0);
    }
    let edges = a.len() - 1;
    if edges == 0 {
        return Ok(0.0);
    }
    Ok(lcp.saturating_sub(1) as f64 / edges as f64)
}

/// `Sigma = U * S * U` with `U = diag(sigma)`.
pub fn assemble_covariance(sigma: &DVector<f64>, similarity: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.len();
    if similarity.nrows() != n || similarity.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "similarity matrix",
            expected: n,
            got: similarity.nrows(),
        });
    }
    if sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(invalid("sigma", "standard deviations must be finite and non-negative"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if similarity[(i, j)] != similarity[(j, i)] {
                return Err(Error::Asymmetric { row: i, col: j });
            }
        }
    }
    // Same operand order for (i, j) and (j, i) so the result is exactly symmetric.
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        sigma[a] * similarity[(a, b)] * sigma[b]
    }))
}

/// Anything that can be scored as a portfolio asset.
pub trait Asset {
    fn path_tokens(&self) -> Vec<Token>;
    fn ledger(&self) -> &MomentLedger;
}

/// Mean vector, risk, similarity and covariance for one set of candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioInputs {
    pub mu: DVector<f64>,
    pub sigma: DVector<f64>,
    pub similarity: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

impl PortfolioInputs {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Plain-vector view for trace records.
    pub fn to_record(&self) -> PortfolioRecord {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        PortfolioRecord {
            mu: self.mu.iter().copied().collect(),
            sigma: self.sigma.iter().copied().collect(),
            similarity: rows(&self.similarity),
            covariance: rows(&self.covariance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioRecord {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub similarity: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
}

pub fn build_portfolio_inputs<A: Asset>(candidates: &[A], gamma: f64) -> Result<PortfolioInputs> {
    if candidates.is_empty() {
        return Err(Error::EmptyBeam);
    }
    let depth = candidates[0].ledger().depth();
    if candidates.iter().any(|c| c.ledger().depth() != depth) {
        return Err(invalid("candidates", "all candidates must have the same depth"));
    }
    let n = candidates.len();
    let paths: Vec<Vec<Token>> = candidates.iter().map(Asset::path_tokens).collect();
    let mut mu = DVector::zeros(n);
    let mut sigma = DVector::zeros(n);
    for (i, c) in candidates.iter().enumerate() {
        mu[i] = trajectory_mean(c.ledger(), gamma)?;
        sigma[i] = trajectory_variance(c.ledger(), gamma)?.sqrt();
    }
    let mut similarity = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = smc_similarity(&paths[i], &paths[j])?;
            similarity[(i, j)] = s;
            similarity[(j, i)] = s;
        }
    }
    let covariance = assemble_covariance(&sigma, &similarity)?;
    Ok(PortfolioInputs {
        mu,
        sigma,
        similarity,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cat(probs: &[f64], values: &[f64]) -> CategoricalOverBins {
        CategoricalOverBins::new(probs.to_vec(), values.to_vec()).unwrap()
    }

    fn ledger(rewards: &[(f64, f64)], last_rtg: (f64, f64)) -> MomentLedger {
        let mut steps: Vec<StepMoments> = rewards
            .iter()
            .map(|&(m, v)| StepMoments {
                reward_mean: m,
                reward_var: v,
                rtg_mean: 0.0,
                rtg_var: 0.0,
            })
            .collect();
        steps.push(StepMoments {
            reward_mean: 0.0,
            reward_var: 0.0,
            rtg_mean: last_rtg.0,
            rtg_var: last_rtg.1,
        });
        MomentLedger::from_steps(steps).unwrap()
    }

    #[test]
    fn moments_examples() {
        assert_eq!(dist_moments(&cat(&[0.5, 0.5], &[0.0, 1.0])), (0.5, 0.25));
        assert_eq!(dist_moments(&cat(&[0.0, 1.0, 0.0], &[1.0, 3.0, 5.0])), (3.0, 0.0));
        let (m, v) = dist_moments(&cat(&[0.2, 0.3, 0.5], &[1.0, 2.0, 3.0]));
        assert_abs_diff_eq!(m, 2.3, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.61, epsilon = 1e-12);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(trajectory_mean(&ledger(&[], (5.0, 0.0)), 1.0).unwrap(), 5.0);
        assert_eq!(trajectory_mean(&ledger(&[(1.0, 0.0)], (2.0, 0.0)), 1.0).unwrap(), 3.0);
        let m = trajectory_mean(&ledger(&[(1.0, 0.0), (1.0, 0.0)], (4.0, 0.0)), 0.9).unwrap();
        assert_abs_diff_eq!(m, 4.626, epsilon = 1e-12);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(trajectory_variance(&ledger(&[(1.0, 0.0)], (1.0, 0.0)), 0.9).unwrap(), 0.0);
        assert_abs_diff_eq!(
            trajectory_variance(&ledger(&[], (0.0, 0.04)), 1.0).unwrap(),
            0.04,
            epsilon = 1e-15
        );
        let v = trajectory_variance(&ledger(&[(0.0, 0.01)], (0.0, 0.04)), 0.9).unwrap();
        assert_abs_diff_eq!(v, 0.01 / 0.81 + 0.04 / 0.6561, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.07331, epsilon = 1e-5);
    }

    #[test]
    fn empty_ledger_is_rejected() {
        assert!(trajectory_mean(&MomentLedger::new(), 0.9).is_err());
        assert!(trajectory_variance(&MomentLedger::new(), 0.9).is_err());
    }

    #[test]
    fn smc_is_a_similarity() {
        assert_eq!(smc_similarity(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(smc_similarity(&[], &[]).unwrap(), 1.0);
        assert_eq!(smc_similarity(&[4], &[5]).unwrap(), 0.0);
        assert_eq!(smc_similarity(&[0, 1, 2], &[9, 1, 2]).unwrap(), 0.0);
        assert!(smc_similarity(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn covariance_is_diagonal_for_identity_similarity() {
        let sigma = DVector::from_vec(vec![0.5, 2.0]);
        let cov = assemble_covariance(&sigma, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(cov, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 4.0]));
        let zero = assemble_covariance(&DVector::zeros(3), &DMatrix::from_element(3, 3, 0.5)).unwrap();
        assert_eq!(zero, DMatrix::zeros(3, 3));
    }

    #[test]
    fn asymmetric_similarity_is_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(matches!(
            assemble_covariance(&DVector::from_vec(vec![1.0, 1.0]), &s),
            Err(Error::Asymmetric { .. })
        ));
    }

    struct Fixture(Vec<Token>, MomentLedger);

    impl Asset for Fixture {
        fn path_tokens(&self) -> Vec<Token> {
            self.0.clone()
        }
        fn ledger(&self) -> &MomentLedger {
            &self.1
        }
    }

    #[test]
    fn single_and_duplicate_candidates() {
        let one = [Fixture(vec![1, 2], ledger(&[], (2.0, 0.25)))];
        let p = build_portfolio_inputs(&one, 1.0).unwrap();
        assert_eq!(p.mu.as_slice(), &[2.0]);
        assert_eq!(p.covariance[(0, 0)], 0.25);
        assert_eq!(p.similarity[(0, 0)], 1.0);

        let twins = [
            Fixture(vec![1, 2, 3], ledger(&[], (1.0, 0.04))),
            Fixture(vec![1, 2, 3], ledger(&[], (1.0, 0.04))),
        ];
        let p = build_portfolio_inputs(&twins, 1.0).unwrap();
        assert_eq!(p.similarity, DMatrix::from_element(2, 2, 1.0));
        let det = p.covariance.determinant();
        assert_abs_diff_eq!(det, 0.0, epsilon = 1e-15);
        assert!(build_portfolio_inputs::<Fixture>(&[], 1.0).is_err());
    }
}
