//! Terminal-wealth utility, the ruin indicator and its smooth surrogate, and
//! the scalarized per-path objective blending the two.

use crate::error::{Error, Result};
use crate::model::SurplusPathBatch;
use crate::reduce::{pairwise_reduce, PATH_LEAF};

/// Weights and shape constants of the scalarized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    /// Scalarization weight β ∈ [0, 1]: 1 is pure utility maximization,
    /// 0 is pure ruin minimization.
    pub beta: f64,
    /// Surrogate sharpness γ > 0; larger tracks the ruin indicator closer.
    pub gamma: f64,
    /// Exponential utility coefficient α > 0, shared with the model.
    pub risk_aversion: f64,
    /// Wealth floor applied before exponentiation so deeply negative paths
    /// saturate instead of overflowing. Unreachable at base-model scales.
    pub wealth_floor: f64,
}

impl ObjectiveParams {
    pub fn new(beta: f64, gamma: f64, risk_aversion: f64) -> Self {
        ObjectiveParams {
            beta,
            gamma,
            risk_aversion,
            wealth_floor: default_wealth_floor(risk_aversion),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if !(0.0..=1.0).contains(&self.beta) {
            return fail("beta must lie in [0, 1]");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return fail("gamma must be positive and finite");
        }
        if !(self.risk_aversion > 0.0) || !self.risk_aversion.is_finite() {
            return fail("alpha must be positive and finite");
        }
        if !self.wealth_floor.is_finite() {
            return fail("wealth floor must be finite");
        }
        Ok(())
    }
}

impl Default for ObjectiveParams {
    /// Base-model objective: β = 0.4, γ = 10, α = 0.3.
    fn default() -> Self {
        ObjectiveParams::new(0.4, 10.0, 0.3)
    }
}

/// Largest floor for which exp(−α·floor) stays finite with headroom.
pub fn default_wealth_floor(risk_aversion: f64) -> f64 {
    -700.0 / risk_aversion
}

/// Exponential utility −exp(−α·wealth): increasing, concave, bounded above
/// by zero.
pub fn utility(wealth: f64, risk_aversion: f64) -> f64 {
    utility_floored(wealth, risk_aversion, default_wealth_floor(risk_aversion))
}

pub(crate) fn utility_floored(wealth: f64, risk_aversion: f64, floor: f64) -> f64 {
    -(-risk_aversion * wealth.max(floor)).exp()
}

/// Derivative of the floored utility in wealth; zero below the floor.
pub(crate) fn utility_grad(wealth: f64, risk_aversion: f64, floor: f64) -> f64 {
    if wealth < floor {
        0.0
    } else {
        risk_aversion * (-risk_aversion * wealth).exp()
    }
}

/// Smooth stand-in for the ruin indicator: 0.5 + 0.5·tanh(−γx).
///
/// Decreasing in x with value 1/2 at zero; approaches the indicator of
/// (−∞, 0) as γ grows. tanh saturates to ±1 in f64 once |γx| ≳ 19, so the
/// open-interval bounds hold exactly only before saturation.
pub fn surrogate_loss(x: f64, gamma: f64) -> f64 {
    0.5 + 0.5 * (-gamma * x).tanh()
}

/// Derivative of `surrogate_loss` in x: −γ/2 · (1 − tanh²(γx)).
pub(crate) fn surrogate_grad(x: f64, gamma: f64) -> f64 {
    let t = (-gamma * x).tanh();
    -0.5 * gamma * (1.0 - t * t)
}

/// Minimum surplus over all grid points including the start, with the index
/// where it is first attained.
pub(crate) fn running_min_with_argmin(path: &[f64]) -> (f64, usize) {
    debug_assert!(!path.is_empty());
    let mut best = path[0];
    let mut best_index = 0;
    for (i, &x) in path.iter().enumerate().skip(1) {
        if x < best {
            best = x;
            best_index = i;
        }
    }
    (best, best_index)
}

/// Minimum over the full surplus path, the quantity whose sign defines ruin.
pub fn running_min(path: &[f64]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::InvalidParams("running_min of an empty path".into()));
    }
    for (i, &x) in path.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteEntry {
                what: "surplus path entry",
                index: i,
                value: x,
            });
        }
    }
    Ok(running_min_with_argmin(path).0)
}

/// Per-path objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathObjective {
    /// u(X_n), the utility of terminal wealth.
    pub terminal_utility: f64,
    /// min_i X_i over the whole grid.
    pub running_min: f64,
    /// Surrogate value g_γ(running_min), in (0, 1) away from saturation.
    pub surrogate_value: f64,
    /// Exact ruin indicator: running_min < 0.
    pub ruin_flag: bool,
    /// β·utility − (1−β)·surrogate.
    pub scalarized: f64,
}

/// Evaluate the objective terms for one stored surplus path.
pub fn path_objective(path: &[f64], params: &ObjectiveParams) -> PathObjective {
    let (min, _) = running_min_with_argmin(path);
    let terminal = path[path.len() - 1];
    let terminal_utility = utility_floored(terminal, params.risk_aversion, params.wealth_floor);
    let surrogate_value = surrogate_loss(min, params.gamma);
    let scalarized = params.beta * terminal_utility - (1.0 - params.beta) * surrogate_value;
    PathObjective {
        terminal_utility,
        running_min: min,
        surrogate_value,
        ruin_flag: min < 0.0,
        scalarized,
    }
}

/// Batch averages of the objective terms with Monte Carlo standard errors.
/// The ruin probability always uses the exact indicator; the surrogate mean
/// is what gradients see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSummary {
    pub mean_scalarized: f64,
    pub mean_utility: f64,
    pub ruin_prob: f64,
    pub mean_surrogate: f64,
    pub scalarized_stderr: f64,
    pub utility_stderr: f64,
    pub surrogate_stderr: f64,
    /// Binomial standard error of the ruin estimate.
    pub ruin_stderr: f64,
    pub n_paths: usize,
}

/// Running sums of objective terms; merged along the fixed reduction tree.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PathSums {
    pub n: usize,
    pub scalarized: f64,
    pub scalarized_sq: f64,
    pub utility: f64,
    pub utility_sq: f64,
    pub surrogate: f64,
    pub surrogate_sq: f64,
    pub ruin_count: usize,
}

impl PathSums {
    pub fn add(&mut self, p: &PathObjective) {
        self.n += 1;
        self.scalarized += p.scalarized;
        self.scalarized_sq += p.scalarized * p.scalarized;
        self.utility += p.terminal_utility;
        self.utility_sq += p.terminal_utility * p.terminal_utility;
        self.surrogate += p.surrogate_value;
        self.surrogate_sq += p.surrogate_value * p.surrogate_value;
        self.ruin_count += p.ruin_flag as usize;
    }

    pub fn merge(mut self, other: PathSums) -> PathSums {
        self.n += other.n;
        self.scalarized += other.scalarized;
        self.scalarized_sq += other.scalarized_sq;
        self.utility += other.utility;
        self.utility_sq += other.utility_sq;
        self.surrogate += other.surrogate;
        self.surrogate_sq += other.surrogate_sq;
        self.ruin_count += other.ruin_count;
        self
    }

    pub fn finish(&self) -> ObjectiveSummary {
        assert!(self.n > 0, "objective summary over an empty batch");
        let n = self.n as f64;
        let mean_stderr = |sum: f64, sum_sq: f64| {
            if self.n < 2 {
                return 0.0;
            }
            let mean = sum / n;
            let var = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        };
        let ruin_prob = self.ruin_count as f64 / n;
        ObjectiveSummary {
            mean_scalarized: self.scalarized / n,
            mean_utility: self.utility / n,
            ruin_prob,
            mean_surrogate: self.surrogate / n,
            scalarized_stderr: mean_stderr(self.scalarized, self.scalarized_sq),
            utility_stderr: mean_stderr(self.utility, self.utility_sq),
            surrogate_stderr: mean_stderr(self.surrogate, self.surrogate_sq),
            ruin_stderr: (ruin_prob * (1.0 - ruin_prob) / n).sqrt(),
            n_paths: self.n,
        }
    }
}

pub(crate) fn accumulate_paths<F>(n_paths: usize, per_path: F) -> PathSums
where
    F: Fn(usize) -> PathObjective + Sync,
{
    pairwise_reduce(
        0,
        n_paths,
        PATH_LEAF,
        &|lo, hi| {
            let mut sums = PathSums::default();
            for j in lo..hi {
                sums.add(&per_path(j));
            }
            sums
        },
        &PathSums::merge,
    )
}

/// Empirical averages of the scalarized objective and its components over a
/// simulated batch.
pub fn scalarized_objective(batch: &SurplusPathBatch, params: &ObjectiveParams) -> ObjectiveSummary {
    accumulate_paths(batch.batch_size, |j| path_objective(batch.path(j), params)).finish()
}
