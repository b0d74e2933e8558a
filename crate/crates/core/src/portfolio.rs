//! Simplex-constrained mean-variance allocation.
//!
//! Maximizes `w'mu - delta w'Sigma w + rho alpha w'w` over the probability
//! simplex, where `rho = -1` spreads weight across assets and `rho = +1`
//! concentrates it. The solver is projected gradient ascent with an exact
//! Euclidean projection and backtracking; [`grid_oracle`] enumerates a
//! simplex lattice for validation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Weights below this are clamped to zero on output.
pub const WEIGHT_FLOOR: f64 = 1e-9;

/// Sign of the `alpha w'w` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizationMode {
    /// `-alpha w'w`: penalizes concentration, keeps the program concave.
    #[default]
    Spread,
    /// `+alpha w'w`: rewards concentration; may make the program non-concave.
    Concentrate,
}

impl RegularizationMode {
    pub fn sign(self) -> f64 {
        match self {
            Self::Spread => -1.0,
            Self::Concentrate => 1.0,
        }
    }
}

impl std::str::FromStr for RegularizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spread" => Ok(Self::Spread),
            "concentrate" => Ok(Self::Concentrate),
            other => Err(invalid("reg_sign", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioProblem {
    mu: DVector<f64>,
    covariance: DMatrix<f64>,
    delta: f64,
    alpha: f64,
    mode: RegularizationMode,
}

impl PortfolioProblem {
    pub fn new(
        mu: DVector<f64>,
        covariance: DMatrix<f64>,
        delta: f64,
        alpha: f64,
        mode: RegularizationMode,
    ) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(invalid("mu", "need at least one asset"));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: n,
                got: covariance.nrows(),
            });
        }
        if mu.iter().chain(covariance.iter()).any(|v| !v.is_finite())
            || !delta.is_finite()
            || !alpha.is_finite()
        {
            return Err(Error::NonFinite("portfolio problem"));
        }
        if delta < 0.0 || alpha < 0.0 {
            return Err(invalid("delta/alpha", "must be non-negative"));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 {
                    return Err(Error::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self {
            mu,
            covariance,
            delta,
            alpha,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mode(&self) -> RegularizationMode {
        self.mode
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let quad = w.dot(&(&self.covariance * w));
        w.dot(&self.mu) - self.delta * quad + self.mode.sign() * self.alpha * w.dot(w)
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.mu - (&self.covariance * w) * (2.0 * self.delta) + w * (2.0 * self.mode.sign() * self.alpha)
    }

    fn hessian(&self) -> DMatrix<f64> {
        let n = self.len();
        &self.covariance * (-2.0 * self.delta)
            + DMatrix::identity(n, n) * (2.0 * self.mode.sign() * self.alpha)
    }

    /// Whether the objective is concave on the simplex (checked on its tangent space).
    pub fn is_concave(&self) -> bool {
        let n = self.len();
        if n == 1 {
            return true;
        }
        let p = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let tangent = &p * self.hessian() * &p;
        let tangent = (&tangent + tangent.transpose()) * 0.5;
        SymmetricEigen::new(tangent).eigenvalues.max() <= 1e-12
    }

    fn curvature_bound(&self) -> f64 {
        let h = self.hessian();
        let h = (&h + h.transpose()) * 0.5;
        SymmetricEigen::new(h)
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, e| acc.max(e.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub step: f64,
    pub gradient_mapping_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop once the gradient-mapping norm falls to this value.
    pub tol: f64,
    pub max_iters: usize,
    pub trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 20_000,
            trace: false,
        }
    }
}

/// Allocation on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioWeights(DVector<f64>);

impl PortfolioWeights {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clamp tiny weights to zero and renormalize.
    fn finalize(mut w: DVector<f64>) -> Self {
        for x in w.iter_mut() {
            if *x < WEIGHT_FLOOR {
                *x = 0.0;
            }
        }
        let total = w.sum();
        Self(w / total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioSolution {
    pub weights: PortfolioWeights,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the program is not concave on the simplex; the weights are then a KKT point.
    pub nonconcave: bool,
    pub trace: Vec<TracePoint>,
}

/// Euclidean projection onto `{w : w >= 0, sum w = 1}` by sorting.
pub fn project_to_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

fn best_vertex(problem: &PortfolioProblem) -> PortfolioSolution {
    let n = problem.len();
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for i in 0..n {
        let value = problem.objective(&unit(n, i));
        if value > best_value {
            best = i;
            best_value = value;
        }
    }
    PortfolioSolution {
        weights: PortfolioWeights(unit(n, best)),
        objective: best_value,
        iterations: 0,
        converged: true,
        nonconcave: !problem.is_concave(),
        trace: Vec::new(),
    }
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// Maximize the mean-variance objective over the simplex.
///
/// With `delta = 0` and a linear or convex objective the optimum is a
/// vertex and is returned exactly; ties go to the lowest index.
pub fn solve_portfolio(problem: &PortfolioProblem, options: SolveOptions) -> Result<PortfolioSolution> {
    if !(options.tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let n = problem.len();
    let convex_or_linear = problem.delta == 0.0
        && (problem.alpha == 0.0 || problem.mode == RegularizationMode::Concentrate);
    if n == 1 || convex_or_linear {
        return Ok(best_vertex(problem));
    }

    let nonconcave = !problem.is_concave();
    let lipschitz = problem.curvature_bound().max(1e-12);
    let mut step = 1.0 / lipschitz;
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut value = problem.objective(&w);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iters {
        let grad = problem.gradient(&w);
        let mapping = (project_to_simplex(&(&w + &grad * step)) - &w).norm() / step;
        if options.trace {
            trace.push(TracePoint {
                iteration: iterations,
                objective: value,
                step,
                gradient_mapping_norm: mapping,
            });
        }
        if mapping <= options.tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Backtracking from an optimistic step; the quadratic model guarantees ascent.
        let mut trial_step = step * 2.0;
        loop {
            let next = project_to_simplex(&(&w + &grad * trial_step));
            let delta_w = &next - &w;
            let next_value = problem.objective(&next);
            let model = value + grad.dot(&delta_w) - delta_w.norm_squared() / (2.0 * trial_step);
            if next_value >= model - 1e-15 * value.abs().max(1.0) && next_value >= value {
                w = next;
                value = next_value;
                step = trial_step;
                break;
            }
            trial_step *= 0.5;
            if trial_step < 1e-30 {
                // No ascent direction left at machine precision.
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }

    let weights = PortfolioWeights::finalize(w);
    let objective = problem.objective(weights.as_vector());
    Ok(PortfolioSolution {
        weights,
        objective,
        iterations,
        converged,
        nonconcave,
        trace,
    })
}

/// Best point of the simplex lattice with spacing `step` (at most 4 assets).
pub fn grid_oracle(problem: &PortfolioProblem, step: f64) -> Result<PortfolioSolution> {
    let n = problem.len();
    if n > 4 {
        return Err(invalid("n", format!("grid oracle supports at most 4 assets, got {n}")));
    }
    if !(step > 0.0 && step <= 0.1) {
        return Err(invalid("step", format!("must lie in (0, 0.1], got {step}")));
    }
    let divisions = (1.0 / step).round() as usize;
    let mut counts = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, vec![0usize; n]);
    let mut w = DVector::zeros(n);
    enumerate(&mut counts, 0, divisions, &mut |c| {
        for (wi, &ci) in w.iter_mut().zip(c) {
            *wi = ci as f64 / divisions as f64;
        }
        let value = problem.objective(&w);
        if value > best.0 {
            best = (value, c.to_vec());
        }
    });
    let weights = DVector::from_iterator(n, best.1.iter().map(|&c| c as f64 / divisions as f64));
    Ok(PortfolioSolution {
        weights: PortfolioWeights(weights),
        objective: best.0,
        iterations: 0,
        converged: true,
        nonconcave: !problem.is_concave(),
        trace: Vec::new(),
    })
}

/// Visit every composition of `remaining` into the slots from `index` on,
/// largest leading count first.
fn enumerate(counts: &mut [usize], index: usize, remaining: usize, visit: &mut impl FnMut(&[usize])) {
    if index == counts.len() - 1 {
        counts[index] = remaining;
        visit(counts);
        return;
    }
    for c in (0..=remaining).rev() {
        counts[index] = c;
        enumerate(counts, index + 1, remaining - c, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn problem(mu: &[f64], cov: &[f64], delta: f64, alpha: f64, mode: RegularizationMode) -> PortfolioProblem {
        let n = mu.len();
        PortfolioProblem::new(
            DVector::from_row_slice(mu),
            DMatrix::from_row_slice(n, n, cov),
            delta,
            alpha,
            mode,
        )
        .unwrap()
    }

    #[test]
    fn linear_objective_picks_argmax_vertex() {
        let p = problem(&[0.7, 0.4, 0.2], &[0.0; 9], 0.0, 0.0, RegularizationMode::Spread);
        let s = solve_portfolio(&p, SolveOptions::default()).unwrap();
        assert_eq!(s.weights.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn tied_vertices_prefer_lowest_index() {
        let p = problem(&[0.3, 0.5, 0.5], &[0.0; 9], 0.0, 0.0, RegularizationMode::Spread);
        let s = solve_portfolio(&p, SolveOptions::default()).unwrap();
        assert_eq!(s.weights.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn symmetric_instance_is_uniform() {
        for n in [2usize, 3, 5, 8] {
            let mut cov = vec![0.0; n * n];
            for i in 0..n {
                cov[i * n + i] = 0.3;
            }
            let p = problem(&vec![1.0; n], &cov, 1.0, 0.1, RegularizationMode::Spread);
            let s = solve_portfolio(&p, SolveOptions::default()).unwrap();
            for &w in s.weights.as_slice() {
                assert_abs_diff_eq!(w, 1.0 / n as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let on = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        assert_abs_diff_eq!(project_to_simplex(&on), on, epsilon = 1e-15);
        let p = project_to_simplex(&DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        let p = project_to_simplex(&DVector::from_vec(vec![-5.0, -5.0, -5.0, -5.0]));
        for &x in p.iter() {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn grid_oracle_validates_arguments() {
        let p = problem(&[1.0; 5], &[0.0; 25], 1.0, 0.0, RegularizationMode::Spread);
        assert!(grid_oracle(&p, 0.05).is_err());
        let q = problem(&[1.0, 0.0], &[0.0; 4], 0.0, 0.0, RegularizationMode::Spread);
        assert!(grid_oracle(&q, 0.2).is_err());
        assert!(grid_oracle(&q, 0.0).is_err());
        assert_eq!(grid_oracle(&q, 0.1).unwrap().weights.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn problem_validation() {
        let bad = PortfolioProblem::new(
            DVector::from_vec(vec![1.0, f64::NAN]),
            DMatrix::identity(2, 2),
            1.0,
            0.1,
            RegularizationMode::Spread,
        );
        assert!(matches!(bad, Err(Error::NonFinite(_))));
        let asym = PortfolioProblem::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            1.0,
            0.1,
            RegularizationMode::Spread,
        );
        assert!(matches!(asym, Err(Error::Asymmetric { .. })));
        let neg = PortfolioProblem::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::identity(1, 1),
            -1.0,
            0.1,
            RegularizationMode::Spread,
        );
        assert!(neg.is_err());
    }

    #[test]
    fn concentrate_mode_flags_nonconcave_programs() {
        let p = problem(&[0.5, 0.5], &[0.01, 0.0, 0.0, 0.01], 1.0, 1.0, RegularizationMode::Concentrate);
        let s = solve_portfolio(&p, SolveOptions::default()).unwrap();
        assert!(s.nonconcave);
        let total: f64 = s.weights.as_slice().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let q = problem(&[0.5, 0.5], &[1.0, 0.0, 0.0, 1.0], 1.0, 0.1, RegularizationMode::Concentrate);
        assert!(!solve_portfolio(&q, SolveOptions::default()).unwrap().nonconcave);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let p = problem(&[0.9, 0.2, 0.5], &[0.5, 0.1, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 0.2], 1.0, 0.1, RegularizationMode::Spread);
        let s = solve_portfolio(&p, SolveOptions { tol: 1e-14, max_iters: 1, trace: false }).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn singular_covariance_is_handled() {
        let p = problem(&[0.5, 0.5], &[0.04, 0.04, 0.04, 0.04], 1.0, 0.0, RegularizationMode::Spread);
        let s = solve_portfolio(&p, SolveOptions::default()).unwrap();
        assert!(s.converged);
        let total: f64 = s.weights.as_slice().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }
}
