//! Reproduction harness: no-reinsurance baseline, surrogate sharpness sweep,
//! retention-curve extraction, and the scalarization-weight sweep tracing the
//! utility/ruin trade-off frontier.

use crate::error::{Error, Result};
use crate::model::{roll_path, sample_scenarios_range, ModelParams};
use crate::objective::{
    path_objective, running_min_with_argmin, surrogate_loss, ObjectiveParams, ObjectiveSummary,
    PathSums,
};
use crate::policy::{init_policy, MlpArchitecture, MlpPolicy, ReinsurancePolicy};
use crate::reduce::{pairwise_reduce, PATH_LEAF};
use crate::seed::derive_seed;
use crate::train::{train_policy, StopReason, TrainConfig, TrainReport};

/// Paths per streamed evaluation chunk. Large batches are evaluated chunk by
/// chunk so a paper-sized test set never needs to exist in memory; row values
/// depend only on the global path index, so chunking does not change them.
const EVAL_CHUNK: usize = 1 << 18;

/// Default surplus grid for retention curves.
pub const DEFAULT_GRID_MIN: f64 = -1.0;
pub const DEFAULT_GRID_MAX: f64 = 10.0;
pub const DEFAULT_GRID_STEP: f64 = 0.05;

/// Inclusive evenly spaced grid from `min` to `max`.
pub fn surplus_grid(min: f64, max: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && max >= min, "grid bounds must be ordered");
    let count = ((max - min) / step).round() as usize;
    (0..=count).map(|i| min + step * i as f64).collect()
}

/// Roll paths on the fly and accumulate objective sums, without storing the
/// batch. Identical values to simulating first and averaging second.
fn accumulate_streamed<F>(
    model: &ModelParams,
    obj: &ObjectiveParams,
    policy: &F,
    m: usize,
    seed: u64,
) -> Result<PathSums>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    assert!(m >= 1, "evaluation needs at least one path");
    let n = model.n_steps;
    let mut total = PathSums::default();
    let mut offset = 0usize;
    while offset < m {
        let count = EVAL_CHUNK.min(m - offset);
        let scenarios = sample_scenarios_range(model, seed, offset as u64, count);
        let leaf = |lo: usize, hi: usize| -> Result<PathSums> {
            let mut surplus = vec![0.0; n + 1];
            let mut ou = vec![0.0; n + 1];
            let mut retention = vec![0.0; n];
            let mut sums = PathSums::default();
            for j in lo..hi {
                roll_path(
                    model,
                    policy,
                    scenarios.claims(j),
                    scenarios.noise(j),
                    &mut surplus,
                    &mut ou,
                    &mut retention,
                )
                .map_err(|(step, value)| Error::NonFinite {
                    what: "surplus",
                    path: offset + j,
                    step,
                    value,
                })?;
                sums.add(&path_objective(&surplus, obj));
            }
            Ok(sums)
        };
        let merge = |a: Result<PathSums>, b: Result<PathSums>| match (a, b) {
            (Ok(a), Ok(b)) => Ok(a.merge(b)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        let chunk_sums = pairwise_reduce(0, count, PATH_LEAF, &leaf, &merge)?;
        total = total.merge(chunk_sums);
        offset += count;
    }
    Ok(total)
}

/// Monte Carlo metrics of one policy on `m` seeded paths.
pub fn evaluate_policy<F>(
    model: &ModelParams,
    obj: &ObjectiveParams,
    policy: F,
    m: usize,
    seed: u64,
) -> Result<ObjectiveSummary>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    Ok(accumulate_streamed(model, obj, &policy, m, seed)?.finish())
}

/// Evaluate several policies on the *same* scenario stream (common random
/// numbers), sampling each chunk once.
pub fn evaluate_policies(
    model: &ModelParams,
    obj: &ObjectiveParams,
    policies: &[&(dyn Fn(usize, f64) -> f64 + Sync)],
    m: usize,
    seed: u64,
) -> Result<Vec<ObjectiveSummary>> {
    assert!(m >= 1, "evaluation needs at least one path");
    let n = model.n_steps;
    let mut totals = vec![PathSums::default(); policies.len()];
    let mut offset = 0usize;
    while offset < m {
        let count = EVAL_CHUNK.min(m - offset);
        let scenarios = sample_scenarios_range(model, seed, offset as u64, count);
        for (pi, policy) in policies.iter().enumerate() {
            let leaf = |lo: usize, hi: usize| -> Result<PathSums> {
                let mut surplus = vec![0.0; n + 1];
                let mut ou = vec![0.0; n + 1];
                let mut retention = vec![0.0; n];
                let mut sums = PathSums::default();
                for j in lo..hi {
                    roll_path(
                        model,
                        policy,
                        scenarios.claims(j),
                        scenarios.noise(j),
                        &mut surplus,
                        &mut ou,
                        &mut retention,
                    )
                    .map_err(|(step, value)| Error::NonFinite {
                        what: "surplus",
                        path: offset + j,
                        step,
                        value,
                    })?;
                    sums.add(&path_objective(&surplus, obj));
                }
                Ok(sums)
            };
            let merge = |a: Result<PathSums>, b: Result<PathSums>| match (a, b) {
                (Ok(a), Ok(b)) => Ok(a.merge(b)),
                (Err(e), _) | (_, Err(e)) => Err(e),
            };
            let chunk = pairwise_reduce(0, count, PATH_LEAF, &leaf, &merge)?;
            totals[pi] = totals[pi].merge(chunk);
        }
        offset += count;
    }
    Ok(totals.iter().map(PathSums::finish).collect())
}

/// Monte Carlo ruin probability without reinsurance (retention fixed at 1)
/// and its binomial standard error.
pub fn baseline_ruin(model: &ModelParams, m: usize, seed: u64) -> Result<(f64, f64)> {
    let obj = ObjectiveParams::new(0.0, 10.0, model.risk_aversion);
    let summary = evaluate_policy(model, &obj, |_, _| 1.0, m, seed)?;
    Ok((summary.ruin_prob, summary.ruin_stderr))
}

/// Expected surrogate loss under no reinsurance for a ladder of sharpness
/// values, against the exact ruin probability on the same paths.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSweepResult {
    pub gammas: Vec<f64>,
    pub surrogate_means: Vec<f64>,
    pub exact_ruin_prob: f64,
    /// Binomial standard error of the exact estimate.
    pub mc_stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Default)]
struct GammaSums {
    n: usize,
    ruin_count: usize,
    surrogate: Vec<f64>,
}

impl GammaSums {
    fn new(k: usize) -> GammaSums {
        GammaSums {
            n: 0,
            ruin_count: 0,
            surrogate: vec![0.0; k],
        }
    }

    fn merge(mut self, other: GammaSums) -> GammaSums {
        self.n += other.n;
        self.ruin_count += other.ruin_count;
        for (a, b) in self.surrogate.iter_mut().zip(&other.surrogate) {
            *a += b;
        }
        self
    }
}

/// Evaluate E[g_γ(min X)] under full retention on one shared scenario
/// stream for every γ, plus the exact ruin frequency of the same paths.
pub fn gamma_sweep(
    model: &ModelParams,
    gammas: &[f64],
    m: usize,
    seed: u64,
) -> Result<GammaSweepResult> {
    if gammas.is_empty() || gammas.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidParams(
            "gamma values must be positive and finite".into(),
        ));
    }
    assert!(m >= 1, "evaluation needs at least one path");
    let n = model.n_steps;
    let mut total = GammaSums::new(gammas.len());
    let mut offset = 0usize;
    while offset < m {
        let count = EVAL_CHUNK.min(m - offset);
        let scenarios = sample_scenarios_range(model, seed, offset as u64, count);
        let leaf = |lo: usize, hi: usize| -> Result<GammaSums> {
            let mut surplus = vec![0.0; n + 1];
            let mut ou = vec![0.0; n + 1];
            let mut retention = vec![0.0; n];
            let mut sums = GammaSums::new(gammas.len());
            let full = |_: usize, _: f64| 1.0;
            for j in lo..hi {
                roll_path(
                    model,
                    &full,
                    scenarios.claims(j),
                    scenarios.noise(j),
                    &mut surplus,
                    &mut ou,
                    &mut retention,
                )
                .map_err(|(step, value)| Error::NonFinite {
                    what: "surplus",
                    path: offset + j,
                    step,
                    value,
                })?;
                let (min, _) = running_min_with_argmin(&surplus);
                sums.n += 1;
                sums.ruin_count += (min < 0.0) as usize;
                for (acc, &gamma) in sums.surrogate.iter_mut().zip(gammas) {
                    *acc += surrogate_loss(min, gamma);
                }
            }
            Ok(sums)
        };
        let merge = |a: Result<GammaSums>, b: Result<GammaSums>| match (a, b) {
            (Ok(a), Ok(b)) => Ok(a.merge(b)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        let chunk = pairwise_reduce(0, count, PATH_LEAF, &leaf, &merge)?;
        total = total.merge(chunk);
        offset += count;
    }
    let n_total = total.n as f64;
    let exact = total.ruin_count as f64 / n_total;
    Ok(GammaSweepResult {
        gammas: gammas.to_vec(),
        surrogate_means: total.surrogate.iter().map(|s| s / n_total).collect(),
        exact_ruin_prob: exact,
        mc_stderr: (exact * (1.0 - exact) / n_total).sqrt(),
        n_paths: total.n,
    })
}

/// One sampled point of a surrogate curve g_γ(x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSample {
    pub gamma: f64,
    pub x: f64,
    pub value: f64,
}

/// Samples of each g_γ on an evenly spaced grid, for plotting the surrogate
/// family next to the indicator.
pub fn surrogate_curve_samples(gammas: &[f64], min: f64, max: f64, step: f64) -> Vec<CurveSample> {
    let grid = surplus_grid(min, max, step);
    gammas
        .iter()
        .flat_map(|&gamma| {
            grid.iter().map(move |&x| CurveSample {
                gamma,
                x,
                value: surrogate_loss(x, gamma),
            })
        })
        .collect()
}

/// A trained policy's retention rule sampled on a surplus grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionCurve {
    pub beta: f64,
    pub surplus_grid: Vec<f64>,
    pub retention_values: Vec<f64>,
}

/// Sample b̄(x) on a grid.
pub fn extract_retention_curve(policy: &MlpPolicy, grid: &[f64], beta: f64) -> RetentionCurve {
    RetentionCurve {
        beta,
        surplus_grid: grid.to_vec(),
        retention_values: policy.eval_retention_batch(grid),
    }
}

/// One point of the utility/ruin trade-off frontier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub beta: f64,
    pub expected_utility: f64,
    pub utility_stderr: f64,
    /// Exact-indicator ruin probability on the shared test stream.
    pub ruin_probability: f64,
    pub ruin_stderr: f64,
    pub surrogate_loss: f64,
    /// Identifier under which the trained policy is checkpointed.
    pub policy_checkpoint_id: String,
    pub stop_reason: StopReason,
}

/// Frontier sweep output: one point per scalarization weight plus the
/// no-reinsurance reference, all measured on the same scenario stream.
#[derive(Debug, Clone)]
pub struct ParetoSweep {
    pub points: Vec<ParetoPoint>,
    pub baseline: ObjectiveSummary,
    pub policies: Vec<ReinsurancePolicy>,
    pub reports: Vec<TrainReport>,
    pub test_m: usize,
    pub test_seed: u64,
}

/// Train one policy per scalarization weight (independent derived seeds) and
/// evaluate every policy plus the full-retention baseline on one shared test
/// stream. Training failures mark their point (`Diverged`) without aborting
/// the sweep. `on_point` fires after each weight finishes training.
pub fn pareto_sweep(
    model: &ModelParams,
    base_obj: &ObjectiveParams,
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
    betas: &[f64],
    test_m: usize,
    mut on_point: impl FnMut(usize, f64, &TrainReport),
) -> Result<ParetoSweep> {
    if betas.is_empty() {
        return Err(Error::InvalidParams("betas must be nonempty".into()));
    }
    if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::InvalidParams("betas must lie in [0, 1]".into()));
    }
    let mut sorted: Vec<f64> = betas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("betas are finite"));

    let mut policies = Vec::with_capacity(sorted.len());
    let mut reports = Vec::with_capacity(sorted.len());
    for (k, &beta) in sorted.iter().enumerate() {
        let obj = ObjectiveParams { beta, ..*base_obj };
        let run_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, "pareto-train", k as u64),
            ..cfg.clone()
        };
        let initial = ReinsurancePolicy::Shared(init_policy(
            arch,
            derive_seed(run_cfg.seed, "policy-init", 0),
        )?);
        let (policy, report) = train_policy(model, &obj, initial, &run_cfg)?;
        on_point(k, beta, &report);
        policies.push(policy);
        reports.push(report);
    }

    let test_seed = derive_seed(cfg.seed, "pareto-test", 0);
    let mut closures: Vec<Box<dyn Fn(usize, f64) -> f64 + Sync>> = policies
        .iter()
        .map(|p| {
            let p = p.clone();
            Box::new(move |step: usize, x: f64| p.retention(step, x))
                as Box<dyn Fn(usize, f64) -> f64 + Sync>
        })
        .collect();
    closures.push(Box::new(|_, _| 1.0));
    let refs: Vec<&(dyn Fn(usize, f64) -> f64 + Sync)> =
        closures.iter().map(|b| b.as_ref()).collect();
    let mut summaries = evaluate_policies(model, base_obj, &refs, test_m, test_seed)?;
    let baseline = summaries.pop().expect("baseline summary");

    let points = sorted
        .iter()
        .zip(&summaries)
        .zip(&reports)
        .enumerate()
        .map(|(k, ((&beta, summary), report))| ParetoPoint {
            beta,
            expected_utility: summary.mean_utility,
            utility_stderr: summary.utility_stderr,
            ruin_probability: summary.ruin_prob,
            ruin_stderr: summary.ruin_stderr,
            surrogate_loss: summary.mean_surrogate,
            policy_checkpoint_id: format!("policy_{k:02}_beta_{beta}"),
            stop_reason: report.stop_reason,
        })
        .collect();

    Ok(ParetoSweep {
        points,
        baseline,
        policies,
        reports,
        test_m,
        test_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{roll_surplus, sample_scenarios};
    use crate::objective::scalarized_objective;
    use crate::policy::MlpPolicy;

    #[test]
    fn surplus_grid_is_inclusive_and_even() {
        let g = surplus_grid(-1.0, 10.0, 0.05);
        assert_eq!(g.len(), 221);
        assert_eq!(g[0], -1.0);
        assert!((g[220] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn streamed_evaluation_matches_in_memory_batch() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let m = 2048;
        let seed = 21;
        let streamed = evaluate_policy(&model, &obj, |_, _| 1.0, m, seed).unwrap();
        let scenarios = sample_scenarios(&model, m, seed);
        let batch = roll_surplus(&model, &scenarios, |_| 1.0).unwrap();
        let in_memory = scalarized_objective(&batch, &obj);
        assert_eq!(streamed, in_memory, "two evaluation routes must agree");
    }

    #[test]
    fn multi_policy_evaluation_matches_single_runs() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let half = |_: usize, _: f64| 0.5;
        let full = |_: usize, _: f64| 1.0;
        let both = evaluate_policies(&model, &obj, &[&half, &full], 1024, 4).unwrap();
        let solo_half = evaluate_policy(&model, &obj, half, 1024, 4).unwrap();
        let solo_full = evaluate_policy(&model, &obj, full, 1024, 4).unwrap();
        assert_eq!(both[0], solo_half);
        assert_eq!(both[1], solo_full);
    }

    #[test]
    fn baseline_ruin_is_reproducible_and_bounded() {
        let model = ModelParams::default();
        let (p1, se1) = baseline_ruin(&model, 1 << 14, 2).unwrap();
        let (p2, _) = baseline_ruin(&model, 1 << 14, 2).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.2 && p1 < 0.5, "ruin estimate {p1} far from expected");
        assert!(se1 > 0.0 && se1 < 0.01);
    }

    #[test]
    fn huge_capital_never_ruins() {
        let model = ModelParams {
            initial_wealth: 1e6,
            ..ModelParams::default()
        };
        let (p, _) = baseline_ruin(&model, 1 << 12, 0).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn no_claims_no_ruin() {
        let model = ModelParams {
            claim_intensity: 0.0,
            ou_vol: 0.0,
            ..ModelParams::default()
        };
        let (p, _) = baseline_ruin(&model, 1 << 10, 0).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn gamma_sweep_flattens_to_one_half_at_tiny_gamma() {
        let model = ModelParams::default();
        let result = gamma_sweep(&model, &[1e-6, 10.0], 1 << 13, 7).unwrap();
        assert!(
            (result.surrogate_means[0] - 0.5).abs() < 1e-4,
            "g at tiny gamma must flatten to 1/2, got {}",
            result.surrogate_means[0]
        );
        assert!(
            (result.surrogate_means[1] - result.exact_ruin_prob).abs() < 0.05,
            "gamma=10 should track the exact ruin probability"
        );
    }

    #[test]
    fn gamma_sweep_rejects_bad_gammas() {
        let model = ModelParams::default();
        assert!(gamma_sweep(&model, &[], 16, 0).is_err());
        assert!(gamma_sweep(&model, &[0.0], 16, 0).is_err());
        assert!(gamma_sweep(&model, &[-1.0], 16, 0).is_err());
    }

    #[test]
    fn surrogate_curve_covers_requested_domain() {
        let samples = surrogate_curve_samples(&[1.0, 10.0], -3.0, 3.0, 0.5);
        assert_eq!(samples.len(), 2 * 13);
        // Plot data may touch the bounds where tanh saturates in f64.
        assert!(samples.iter().all(|s| (0.0..=1.0).contains(&s.value)));
        let at_zero: Vec<_> = samples.iter().filter(|s| s.x == 0.0).collect();
        assert!(at_zero.iter().all(|s| s.value == 0.5));
    }

    #[test]
    fn zeroed_policy_curve_is_flat_at_one_half() {
        let policy = MlpPolicy::zeroed(&MlpArchitecture::default());
        let grid = surplus_grid(DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_STEP);
        let curve = extract_retention_curve(&policy, &grid, 0.4);
        assert_eq!(curve.retention_values.len(), grid.len());
        assert!(curve.retention_values.iter().all(|&b| b == 0.5));
        assert_eq!(curve.beta, 0.4);
    }

    #[test]
    fn pareto_sweep_smoke() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let arch = MlpArchitecture::with_hidden(vec![4]);
        let cfg = TrainConfig {
            n_batches: 10,
            batch_size: 256,
            eval_batch_size: 1024,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let sweep = pareto_sweep(&model, &obj, &arch, &cfg, &[1.0, 0.0], 4096, |k, beta, _| {
            seen.push((k, beta))
        })
        .unwrap();
        assert_eq!(seen, vec![(0, 0.0), (1, 1.0)], "points sorted by beta");
        assert_eq!(sweep.points.len(), 2);
        assert_eq!(sweep.policies.len(), 2);
        assert!(sweep.points[0].beta < sweep.points[1].beta);
        assert!(sweep.baseline.ruin_prob > 0.0);
        assert_ne!(
            sweep.points[0].policy_checkpoint_id,
            sweep.points[1].policy_checkpoint_id
        );
    }
}
