//! Discretized surplus model: premium income, proportional reinsurance cost,
//! compound-Poisson aggregate claims, and a mean-reverting perturbation, all
//! on a uniform time grid t_i = i·T/n.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::path_rng;

/// Market and model constants plus the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Starting surplus x. Must be positive so paths do not begin in ruin.
    pub initial_wealth: f64,
    /// Planning horizon T.
    pub time_horizon: f64,
    /// Number of grid steps n; retentions are renegotiated at each t_i.
    pub n_steps: usize,
    /// Claim arrival intensity λ (claims per unit time).
    pub claim_intensity: f64,
    /// Expected claim size μ.
    pub mean_claim: f64,
    /// Insurer safety loading η ≥ 0 in the expected value premium principle.
    pub insurer_loading: f64,
    /// Reinsurer safety loading θ. Must exceed η or reinsurance would be a
    /// free lunch.
    pub reinsurer_loading: f64,
    /// Exponential utility coefficient α > 0.
    pub risk_aversion: f64,
    /// Mean-reversion level κ of the perturbation.
    pub ou_level: f64,
    /// Mean-reversion speed ξ ≥ 0.
    pub ou_speed: f64,
    /// Perturbation volatility ν ≥ 0.
    pub ou_vol: f64,
    /// Initial perturbation value L_0. Defaults to the mean-reversion level.
    pub ou_initial: f64,
}

impl Default for ModelParams {
    /// Base-model constants: unit claim flow, 50%/70% loadings, a weak
    /// mean-zero perturbation, and a ten-step unit grid.
    fn default() -> Self {
        ModelParams {
            initial_wealth: 1.0,
            time_horizon: 10.0,
            n_steps: 10,
            claim_intensity: 1.0,
            mean_claim: 1.0,
            insurer_loading: 0.5,
            reinsurer_loading: 0.7,
            risk_aversion: 0.3,
            ou_level: 0.0,
            ou_speed: 0.2,
            ou_vol: 0.05,
            ou_initial: 0.0,
        }
    }
}

impl ModelParams {
    /// Uniform step length Δt = T/n.
    pub fn dt(&self) -> f64 {
        self.time_horizon / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if !(self.initial_wealth > 0.0) {
            return fail("initial_wealth must be positive");
        }
        if !(self.time_horizon > 0.0) {
            return fail("time_horizon must be positive");
        }
        if self.n_steps < 1 {
            return fail("n_steps must be at least 1");
        }
        if !(self.claim_intensity >= 0.0) {
            return fail("lambda must be nonnegative");
        }
        if !(self.mean_claim > 0.0) {
            return fail("mu must be positive");
        }
        if !(self.insurer_loading >= 0.0) {
            return fail("eta must be nonnegative");
        }
        if !(self.reinsurer_loading > self.insurer_loading) {
            return fail("theta must exceed eta");
        }
        if !(self.risk_aversion > 0.0) {
            return fail("alpha must be positive");
        }
        if !(self.ou_speed >= 0.0) {
            return fail("xi must be nonnegative");
        }
        if !(self.ou_vol >= 0.0) {
            return fail("nu must be nonnegative");
        }
        for (name, v) in [
            ("initial_wealth", self.initial_wealth),
            ("time_horizon", self.time_horizon),
            ("lambda", self.claim_intensity),
            ("mu", self.mean_claim),
            ("eta", self.insurer_loading),
            ("theta", self.reinsurer_loading),
            ("alpha", self.risk_aversion),
            ("kappa", self.ou_level),
            ("xi", self.ou_speed),
            ("nu", self.ou_vol),
            ("ou_initial", self.ou_initial),
        ] {
            if !v.is_finite() {
                return fail(&format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Premium collected at t_step for cover over (t_step, t_step+1]:
/// (1+η)·λ·μ·Δt, and zero at the final grid point where no further cover
/// is bought.
pub fn premium(params: &ModelParams, step: usize) -> f64 {
    assert!(
        step <= params.n_steps,
        "premium step {step} out of range 0..={}",
        params.n_steps
    );
    if step == params.n_steps {
        return 0.0;
    }
    (1.0 + params.insurer_loading) * params.claim_intensity * params.mean_claim * params.dt()
}

/// Reinsurance premium for retention `b` over (t_step, t_step+1]:
/// (1+θ)·λ·μ·(1−b)·Δt. Full retention costs nothing.
pub fn reinsurance_cost(params: &ModelParams, retention: f64, step: usize) -> f64 {
    assert!(
        (0.0..=1.0).contains(&retention),
        "retention {retention} outside [0, 1]"
    );
    assert!(
        step < params.n_steps,
        "reinsurance step {step} out of range 0..{}",
        params.n_steps
    );
    (1.0 + params.reinsurer_loading)
        * params.claim_intensity
        * params.mean_claim
        * (1.0 - retention)
        * params.dt()
}

/// One Euler step of the perturbation:
/// L + ξ(κ − L)Δt + ν·Δt·ε, with the shock scaled by Δt as the dynamics are
/// stated (not √Δt; on the unit base grid the two coincide).
pub fn ou_step(params: &ModelParams, ou_value: f64, shock: f64) -> f64 {
    let dt = params.dt();
    ou_value + params.ou_speed * (params.ou_level - ou_value) * dt + params.ou_vol * dt * shock
}

/// One step of the surplus recursion. Shared by the simulator and the
/// training pass so both produce bit-identical trajectories.
#[inline]
pub(crate) fn step_surplus(
    surplus: f64,
    premium: f64,
    cost: f64,
    ou_value: f64,
    retention: f64,
    claims: f64,
) -> f64 {
    surplus + premium - cost + ou_value - retention * claims
}

/// Pre-sampled exogenous randomness for a batch of paths: per-step aggregate
/// claims and the standard-normal shocks driving the perturbation. Replaying
/// the same batch under different policies gives common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    pub batch_size: usize,
    pub n_steps: usize,
    /// Aggregate claims, path-major `batch_size × n_steps`, all ≥ 0.
    pub aggregate_claims: Vec<f64>,
    /// Standard-normal shocks, path-major `batch_size × n_steps`.
    pub ou_noise: Vec<f64>,
    /// Seed the batch was generated from.
    pub seed: u64,
    /// Global index of row 0; batches may be generated in chunks and row `j`
    /// depends only on `(seed, first_path + j)`.
    pub first_path: u64,
}

impl ScenarioBatch {
    pub fn claims(&self, path: usize) -> &[f64] {
        &self.aggregate_claims[path * self.n_steps..(path + 1) * self.n_steps]
    }

    pub fn noise(&self, path: usize) -> &[f64] {
        &self.ou_noise[path * self.n_steps..(path + 1) * self.n_steps]
    }
}

/// Fill one path's aggregate claims and shocks from its own RNG stream.
///
/// Per step the draw order is fixed: claim count K ~ Poisson(λΔt), then K
/// claim sizes ~ Exp(mean μ), then one standard-normal shock. Changing this
/// order would silently break every frozen seed.
fn sample_path_into(
    params: &ModelParams,
    seed: u64,
    path_index: u64,
    claims_out: &mut [f64],
    noise_out: &mut [f64],
) {
    let mut rng = path_rng(seed, path_index);
    let rate = params.claim_intensity * params.dt();
    let count_dist = if rate > 0.0 {
        Some(Poisson::new(rate).expect("positive Poisson rate"))
    } else {
        None
    };
    let size_dist = Exp::new(1.0 / params.mean_claim).expect("positive claim rate");
    for (claim, noise) in claims_out.iter_mut().zip(noise_out.iter_mut()) {
        let mut aggregate = 0.0;
        if let Some(dist) = &count_dist {
            let count = dist.sample(&mut rng) as u64;
            for _ in 0..count {
                aggregate += size_dist.sample(&mut rng);
            }
        }
        *claim = aggregate;
        *noise = rng.sample(StandardNormal);
    }
}

/// Sample `count` paths with global indices `first_path..first_path+count`.
///
/// Row contents depend only on `(params, seed, global path index)`, so a
/// large batch can be produced whole or in chunks with identical values.
pub fn sample_scenarios_range(
    params: &ModelParams,
    seed: u64,
    first_path: u64,
    count: usize,
) -> ScenarioBatch {
    let n = params.n_steps;
    let mut aggregate_claims = vec![0.0; count * n];
    let mut ou_noise = vec![0.0; count * n];
    aggregate_claims
        .par_chunks_mut(n)
        .zip(ou_noise.par_chunks_mut(n))
        .enumerate()
        .for_each(|(j, (claims_row, noise_row))| {
            sample_path_into(params, seed, first_path + j as u64, claims_row, noise_row);
        });
    ScenarioBatch {
        batch_size: count,
        n_steps: n,
        aggregate_claims,
        ou_noise,
        seed,
        first_path,
    }
}

/// Sample a batch of `batch_size` paths of exogenous randomness.
pub fn sample_scenarios(params: &ModelParams, batch_size: usize, seed: u64) -> ScenarioBatch {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    sample_scenarios_range(params, seed, 0, batch_size)
}

/// Simulated surplus trajectories with the retentions and perturbation
/// values that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SurplusPathBatch {
    pub batch_size: usize,
    pub n_steps: usize,
    /// Surplus at each grid point, path-major `batch_size × (n_steps+1)`.
    pub surplus: Vec<f64>,
    /// Perturbation values, path-major `batch_size × (n_steps+1)`.
    pub ou_values: Vec<f64>,
    /// Retentions applied per step, path-major `batch_size × n_steps`,
    /// each in (0, 1].
    pub retentions: Vec<f64>,
}

impl SurplusPathBatch {
    pub fn path(&self, path: usize) -> &[f64] {
        &self.surplus[path * (self.n_steps + 1)..(path + 1) * (self.n_steps + 1)]
    }

    pub fn ou_path(&self, path: usize) -> &[f64] {
        &self.ou_values[path * (self.n_steps + 1)..(path + 1) * (self.n_steps + 1)]
    }

    pub fn retention_path(&self, path: usize) -> &[f64] {
        &self.retentions[path * self.n_steps..(path + 1) * self.n_steps]
    }
}

/// Roll a single path given its scenario row. Returns the step at which the
/// surplus stopped being finite, if any.
pub(crate) fn roll_path<F: Fn(usize, f64) -> f64>(
    params: &ModelParams,
    policy_eval: &F,
    claims_row: &[f64],
    noise_row: &[f64],
    surplus_row: &mut [f64],
    ou_row: &mut [f64],
    retention_row: &mut [f64],
) -> std::result::Result<(), (usize, f64)> {
    let n = params.n_steps;
    surplus_row[0] = params.initial_wealth;
    ou_row[0] = params.ou_initial;
    for i in 0..n {
        let retention = policy_eval(i, surplus_row[i]);
        assert!(
            retention > 0.0 && retention <= 1.0,
            "policy produced retention {retention} outside (0, 1]"
        );
        retention_row[i] = retention;
        let next = step_surplus(
            surplus_row[i],
            premium(params, i),
            reinsurance_cost(params, retention, i),
            ou_row[i],
            retention,
            claims_row[i],
        );
        if !next.is_finite() {
            return Err((i, next));
        }
        surplus_row[i + 1] = next;
        ou_row[i + 1] = ou_step(params, ou_row[i], noise_row[i]);
    }
    Ok(())
}

/// Simulate the controlled surplus over a scenario batch under a feedback
/// policy mapping current surplus to a retention in (0, 1]. The terminal
/// convention of full retention applies no further dynamics, so it never
/// enters the recursion.
pub fn roll_surplus<F: Fn(f64) -> f64 + Sync>(
    params: &ModelParams,
    scenarios: &ScenarioBatch,
    policy_eval: F,
) -> Result<SurplusPathBatch> {
    roll_surplus_indexed(params, scenarios, |_, x| policy_eval(x))
}

/// [`roll_surplus`] with the step index passed to the policy, for retention
/// rules that differ between renegotiation dates.
pub fn roll_surplus_indexed<F: Fn(usize, f64) -> f64 + Sync>(
    params: &ModelParams,
    scenarios: &ScenarioBatch,
    policy_eval: F,
) -> Result<SurplusPathBatch> {
    if scenarios.n_steps != params.n_steps {
        return Err(Error::InvalidParams(format!(
            "scenario batch has {} steps, model expects {}",
            scenarios.n_steps, params.n_steps
        )));
    }
    let m = scenarios.batch_size;
    let n = params.n_steps;
    let mut surplus = vec![0.0; m * (n + 1)];
    let mut ou_values = vec![0.0; m * (n + 1)];
    let mut retentions = vec![0.0; m * n];

    // Earliest failing path wins so error reports are stable under
    // work stealing.
    let failure = surplus
        .par_chunks_mut(n + 1)
        .zip(ou_values.par_chunks_mut(n + 1))
        .zip(retentions.par_chunks_mut(n))
        .enumerate()
        .map(|(j, ((surplus_row, ou_row), retention_row))| {
            roll_path(
                params,
                &policy_eval,
                scenarios.claims(j),
                scenarios.noise(j),
                surplus_row,
                ou_row,
                retention_row,
            )
            .err()
            .map(|(step, value)| (j, step, value))
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (Some(x), Some(y)) => Some(if x.0 <= y.0 { x } else { y }),
                (x, y) => x.or(y),
            },
        );
    if let Some((path, step, value)) = failure {
        return Err(Error::NonFinite {
            what: "surplus",
            path,
            step,
            value,
        });
    }
    Ok(SurplusPathBatch {
        batch_size: m,
        n_steps: n,
        surplus,
        ou_values,
        retentions,
    })
}
