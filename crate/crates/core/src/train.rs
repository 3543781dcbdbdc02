//! Training engine: reverse-mode differentiation of the mean episode
//! objective through the unrolled surplus recursion (network → retention →
//! next surplus → next network input → terminal utility and penalty terms),
//! the Adam update, and the mini-batch loop with plateau learning-rate decay
//! and early stopping.

use crate::error::{Error, Result};
use crate::model::{
    premium, reinsurance_cost, roll_surplus_indexed, sample_scenarios, step_surplus, ModelParams,
    ScenarioBatch, SurplusPathBatch,
};
use crate::objective::{
    path_objective, running_min_with_argmin, scalarized_objective, surrogate_grad, utility_grad,
    ObjectiveParams, ObjectiveSummary, PathSums,
};
use crate::policy::{
    init_policy, ForwardScratch, MlpArchitecture, MlpPolicy, ReinsurancePolicy, SliceTrace,
};
use crate::reduce::{pairwise_reduce, PATH_LEAF};
use crate::seed::derive_seed;

/// Patience is counted in epochs of this many consecutive mini-batches.
pub const BATCHES_PER_EPOCH: usize = 10;

/// Relative improvement of the validation objective below which an epoch
/// counts as a plateau for learning-rate decay. Early stopping and best-
/// checkpoint tracking use strict improvement instead: late shape
/// refinements land well under any fixed threshold and must still count.
const PLATEAU_REL_TOL: f64 = 1e-4;

/// Optimizer schedule and batch sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total number of mini-batches (gradient steps).
    pub n_batches: usize,
    /// Paths per mini-batch.
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs without improvement before the learning rate is cut.
    pub plateau_patience: usize,
    /// Divisor applied at each plateau cut.
    pub lr_decay_factor: f64,
    pub min_lr: f64,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Held-out batch used for plateau detection and final metrics.
    pub eval_batch_size: usize,
    /// Reuse the first sampled batch for every step instead of drawing fresh
    /// scenarios, fixing a finite empirical measure.
    pub fixed_dataset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_batches: 2000,
            batch_size: 1 << 14,
            initial_lr: 1e-3,
            plateau_patience: 10,
            lr_decay_factor: 10.0,
            min_lr: 1e-5,
            early_stop_patience: 20,
            seed: 0,
            eval_batch_size: 1 << 16,
            fixed_dataset: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if self.n_batches < 1 {
            return fail("n_batches must be at least 1");
        }
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return fail("batch sizes must be at least 1");
        }
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return fail("patiences must be at least 1");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return fail("initial_lr must be positive and finite");
        }
        if !(self.min_lr > 0.0) || self.min_lr > self.initial_lr {
            return fail("min_lr must be positive and no larger than initial_lr");
        }
        if !(self.lr_decay_factor > 1.0) {
            return fail("lr_decay_factor must exceed 1");
        }
        Ok(())
    }
}

/// Per-layer gradient (or moment) slots mirroring a [`crate::policy::Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<LayerGrad>,
}

/// Parameter gradients aligned with a policy's networks; also reused as Adam
/// moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub nets: Vec<NetGrad>,
}

impl GradientTape {
    pub fn zeros_like(policy: &ReinsurancePolicy) -> GradientTape {
        let nets = policy
            .networks()
            .iter()
            .map(|net| NetGrad {
                layers: net
                    .layers
                    .iter()
                    .map(|layer| LayerGrad {
                        weights: vec![0.0; layer.weights.len()],
                        biases: vec![0.0; layer.biases.len()],
                    })
                    .collect(),
            })
            .collect();
        GradientTape { nets }
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            for (la, lb) in a.layers.iter_mut().zip(&b.layers) {
                for (x, y) in la.weights.iter_mut().zip(&lb.weights) {
                    *x += y;
                }
                for (x, y) in la.biases.iter_mut().zip(&lb.biases) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for net in &mut self.nets {
            for layer in &mut net.layers {
                layer.weights.iter_mut().for_each(|v| *v *= factor);
                layer.biases.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nets.iter().flat_map(|net| {
            net.layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Scratch buffers reused across the paths of one reduction leaf.
struct PathWorkspace {
    surplus: Vec<f64>,
    ou: Vec<f64>,
    retention: Vec<f64>,
    /// One activation trace per step: [normalized input, hidden layers…, output].
    traces: Vec<f64>,
    trace_len: usize,
    adjoint: Vec<f64>,
    scratch: ForwardScratch,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    /// Start offset of each layer's input values within a step trace; the
    /// final entry is the output position.
    trace_offsets: Vec<usize>,
}

impl PathWorkspace {
    fn new(policy: &ReinsurancePolicy, n_steps: usize) -> PathWorkspace {
        let net = &policy.networks()[0];
        let arch = &net.arch;
        let trace_len = net.trace_len();
        let mut trace_offsets = Vec::with_capacity(arch.hidden_layers.len() + 2);
        let mut pos = 0;
        trace_offsets.push(pos);
        pos += arch.input_dim;
        for &w in &arch.hidden_layers {
            trace_offsets.push(pos);
            pos += w;
        }
        trace_offsets.push(pos);
        let max_width = arch.hidden_layers.iter().copied().max().unwrap_or(1);
        PathWorkspace {
            surplus: vec![0.0; n_steps + 1],
            ou: vec![0.0; n_steps + 1],
            retention: vec![0.0; n_steps],
            traces: vec![0.0; n_steps * trace_len],
            trace_len,
            adjoint: vec![0.0; n_steps + 1],
            scratch: ForwardScratch::for_arch(arch),
            delta: vec![0.0; max_width],
            delta_prev: vec![0.0; max_width],
            trace_offsets,
        }
    }
}

/// Forward pass of one path, recording activation traces. Produces exactly
/// the same trajectory as the plain simulator.
fn forward_path(
    policy: &ReinsurancePolicy,
    model: &ModelParams,
    claims: &[f64],
    noise: &[f64],
    ws: &mut PathWorkspace,
) -> std::result::Result<(), (usize, f64)> {
    let n = model.n_steps;
    ws.surplus[0] = model.initial_wealth;
    ws.ou[0] = model.ou_initial;
    for i in 0..n {
        let net = &policy.networks()[policy.net_index(i)];
        let mut trace = SliceTrace {
            buf: &mut ws.traces[i * ws.trace_len..(i + 1) * ws.trace_len],
            pos: 0,
        };
        let retention = net.forward_with(ws.surplus[i], &mut ws.scratch, &mut trace);
        ws.retention[i] = retention;
        let next = step_surplus(
            ws.surplus[i],
            premium(model, i),
            reinsurance_cost(model, retention, i),
            ws.ou[i],
            retention,
            claims[i],
        );
        if !next.is_finite() {
            return Err((i, next));
        }
        ws.surplus[i + 1] = next;
        ws.ou[i + 1] = crate::model::ou_step(model, ws.ou[i], noise[i]);
    }
    Ok(())
}

/// Backpropagate an output cotangent through one network evaluation,
/// accumulating parameter gradients and returning the input cotangent.
#[allow(clippy::too_many_arguments)]
fn backprop_net(
    net: &MlpPolicy,
    trace: &[f64],
    d_output: f64,
    grad: &mut NetGrad,
    delta: &mut [f64],
    delta_prev: &mut [f64],
    trace_offsets: &[usize],
) -> f64 {
    let n_layers = net.layers.len();
    let output = trace[trace_offsets[n_layers]];
    // Logistic readout: dσ/dz = σ(1−σ).
    delta[0] = d_output * output * (1.0 - output);
    let mut delta_len = 1;
    for li in (0..n_layers).rev() {
        let layer = &net.layers[li];
        let in_values = &trace[trace_offsets[li]..trace_offsets[li + 1]];
        let in_len = in_values.len();
        let grad_layer = &mut grad.layers[li];
        for d in delta_prev[..in_len].iter_mut() {
            *d = 0.0;
        }
        for j in 0..delta_len {
            let delta_j = delta[j];
            grad_layer.biases[j] += delta_j;
            let row = &layer.weights[j * in_len..(j + 1) * in_len];
            let grad_row = &mut grad_layer.weights[j * in_len..(j + 1) * in_len];
            for k in 0..in_len {
                grad_row[k] += delta_j * in_values[k];
                delta_prev[k] += delta_j * row[k];
            }
        }
        if li == 0 {
            // Cotangent of the normalized input; undo the affine conditioning.
            return delta_prev[0] * net.arch.input_scale;
        }
        // tanh'(z) = 1 − h² from the stored activations.
        for k in 0..in_len {
            delta[k] = delta_prev[k] * (1.0 - in_values[k] * in_values[k]);
        }
        delta_len = in_len;
    }
    unreachable!("loop returns at the first layer");
}

/// Backward pass of one path. `tape` receives the gradient of the *summed*
/// per-path loss −u_β; the caller scales by 1/m afterwards.
fn backward_path(
    policy: &ReinsurancePolicy,
    model: &ModelParams,
    obj: &ObjectiveParams,
    claims: &[f64],
    ws: &mut PathWorkspace,
    tape: &mut GradientTape,
) {
    let n = model.n_steps;
    let (min_value, argmin) = running_min_with_argmin(&ws.surplus);
    ws.adjoint.iter_mut().for_each(|a| *a = 0.0);
    // Loss per path is −(β·u(X_n) − (1−β)·g(min X)).
    ws.adjoint[n] = -obj.beta * utility_grad(ws.surplus[n], obj.risk_aversion, obj.wealth_floor);
    // The running-min term backpropagates through the argmin grid point only;
    // ties broke to the smallest index in the forward pass.
    ws.adjoint[argmin] += (1.0 - obj.beta) * surrogate_grad(min_value, obj.gamma);

    let ceded_rate =
        (1.0 + model.reinsurer_loading) * model.claim_intensity * model.mean_claim * model.dt();
    for i in (0..n).rev() {
        let a_next = ws.adjoint[i + 1];
        // ∂X_{i+1}/∂b_i: retaining more saves reinsurance premium at the
        // ceded rate but absorbs the full aggregate claim.
        let d_retention = a_next * (ceded_rate - claims[i]);
        let net_index = policy.net_index(i);
        let net = &policy.networks()[net_index];
        let trace = &ws.traces[i * ws.trace_len..(i + 1) * ws.trace_len];
        let d_input = backprop_net(
            net,
            trace,
            d_retention,
            &mut tape.nets[net_index],
            &mut ws.delta,
            &mut ws.delta_prev,
            &ws.trace_offsets,
        );
        // ∂X_{i+1}/∂X_i = 1 plus the feedback through the policy network.
        ws.adjoint[i] += a_next + d_input;
    }
}

struct EpisodeAccum {
    sums: PathSums,
    tape: GradientTape,
}

/// Mean loss −(1/m)·Σ u_β over a scenario batch and its gradient with
/// respect to every policy parameter, by backpropagation through time.
pub fn episode_loss_and_grad(
    policy: &ReinsurancePolicy,
    scenarios: &ScenarioBatch,
    model: &ModelParams,
    obj: &ObjectiveParams,
) -> Result<(f64, GradientTape)> {
    if scenarios.n_steps != model.n_steps {
        return Err(Error::InvalidParams(format!(
            "scenario batch has {} steps, model expects {}",
            scenarios.n_steps, model.n_steps
        )));
    }
    if let ReinsurancePolicy::PerStep(nets) = policy {
        if nets.len() != model.n_steps {
            return Err(Error::InvalidParams(format!(
                "per-step policy has {} networks for {} steps",
                nets.len(),
                model.n_steps
            )));
        }
    }
    let m = scenarios.batch_size;
    assert!(m > 0, "episode over an empty batch");

    let leaf = |lo: usize, hi: usize| -> Result<EpisodeAccum> {
        let mut ws = PathWorkspace::new(policy, model.n_steps);
        let mut acc = EpisodeAccum {
            sums: PathSums::default(),
            tape: GradientTape::zeros_like(policy),
        };
        for j in lo..hi {
            forward_path(policy, model, scenarios.claims(j), scenarios.noise(j), &mut ws)
                .map_err(|(step, value)| Error::NonFinite {
                    what: "surplus",
                    path: j,
                    step,
                    value,
                })?;
            acc.sums.add(&path_objective(&ws.surplus, obj));
            backward_path(policy, model, obj, scenarios.claims(j), &mut ws, &mut acc.tape);
        }
        Ok(acc)
    };
    let merge = |a: Result<EpisodeAccum>, b: Result<EpisodeAccum>| match (a, b) {
        (Ok(mut a), Ok(b)) => {
            a.sums = a.sums.merge(b.sums);
            a.tape.add_assign(&b.tape);
            Ok(a)
        }
        // Report the lowest-indexed failing path regardless of scheduling.
        (Err(a), Err(b)) => Err(match (&a, &b) {
            (Error::NonFinite { path: pa, .. }, Error::NonFinite { path: pb, .. }) if pb < pa => b,
            _ => a,
        }),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    let accum = pairwise_reduce(0, m, PATH_LEAF, &leaf, &merge)?;

    // Per-path backward passes already accumulate ∂(−u_β)/∂θ; the mean loss
    // just scales the sum.
    let mut tape = accum.tape;
    tape.scale(1.0 / m as f64);
    let loss = -(accum.sums.scalarized / m as f64);
    if let Some(bad) = tape.values().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry {
            what: "parameter gradient",
            index: 0,
            value: bad,
        });
    }
    Ok((loss, tape))
}

/// First- and second-moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: GradientTape,
    second_moment: GradientTape,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(policy: &ReinsurancePolicy) -> AdamState {
        AdamState {
            first_moment: GradientTape::zeros_like(policy),
            second_moment: GradientTape::zeros_like(policy),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias-corrected moments (β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8).
pub fn adam_step(
    policy: &mut ReinsurancePolicy,
    grad: &GradientTape,
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (ni, net) in policy.networks_mut().iter_mut().enumerate() {
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &grad.nets[ni].layers[li];
            let m = &mut state.first_moment.nets[ni].layers[li];
            let v = &mut state.second_moment.nets[ni].layers[li];
            let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            };
            for k in 0..layer.weights.len() {
                update(
                    &mut layer.weights[k],
                    g.weights[k],
                    &mut m.weights[k],
                    &mut v.weights[k],
                );
            }
            for k in 0..layer.biases.len() {
                update(
                    &mut layer.biases[k],
                    g.biases[k],
                    &mut m.biases[k],
                    &mut v.biases[k],
                );
            }
        }
    }
}

/// Why a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// All configured batches were consumed.
    Exhausted,
    /// The validation objective stalled for the configured patience.
    EarlyStopped,
    /// A non-finite loss or rollout appeared; the best earlier checkpoint is
    /// returned.
    Diverged,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::Exhausted => write!(f, "exhausted"),
            StopReason::EarlyStopped => write!(f, "early-stopped"),
            StopReason::Diverged => write!(f, "diverged"),
        }
    }
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Zero-based mini-batch index.
    pub iteration: usize,
    pub lr: f64,
    /// Mean u_β on the training mini-batch (higher is better).
    pub train_objective: f64,
    /// Validation objective, present at epoch boundaries.
    pub validation_objective: Option<f64>,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iterations: Vec<IterationRecord>,
    /// Validation objective of the initial policy, before any update.
    pub initial_objective: f64,
    /// Best validation objective seen; the returned policy is its checkpoint.
    pub best_objective: f64,
    /// Number of mini-batches processed when the best checkpoint was taken.
    pub best_iteration: usize,
    pub stop_reason: StopReason,
    pub final_lr: f64,
    /// Metrics of the returned policy on a held-out test batch.
    pub final_metrics: ObjectiveSummary,
}

/// Roll a full policy (shared or per-step) over a scenario batch.
pub fn roll_policy(
    model: &ModelParams,
    scenarios: &ScenarioBatch,
    policy: &ReinsurancePolicy,
) -> Result<SurplusPathBatch> {
    roll_surplus_indexed(model, scenarios, |step, x| policy.retention(step, x))
}

fn validation_objective(
    policy: &ReinsurancePolicy,
    scenarios: &ScenarioBatch,
    model: &ModelParams,
    obj: &ObjectiveParams,
) -> Result<f64> {
    Ok(scalarized_objective(&roll_policy(model, scenarios, policy)?, obj).mean_scalarized)
}

/// Train a policy starting from `initial`, returning the checkpoint with the
/// best validation objective and the full trace.
///
/// Every mini-batch draws fresh scenarios from a seed derived off `cfg.seed`
/// (unless `fixed_dataset` pins the first batch). The validation batch is
/// fixed for the whole run; plateau decay and early stopping watch its
/// objective at epoch boundaries.
pub fn train_policy(
    model: &ModelParams,
    obj: &ObjectiveParams,
    initial: ReinsurancePolicy,
    cfg: &TrainConfig,
) -> Result<(ReinsurancePolicy, TrainReport)> {
    train_policy_with_progress(model, obj, initial, cfg, |_| {})
}

/// [`train_policy`] invoking `progress` after each recorded mini-batch.
pub fn train_policy_with_progress(
    model: &ModelParams,
    obj: &ObjectiveParams,
    initial: ReinsurancePolicy,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<(ReinsurancePolicy, TrainReport)> {
    model.validate()?;
    obj.validate()?;
    cfg.validate()?;
    if let ReinsurancePolicy::PerStep(nets) = &initial {
        if nets.len() != model.n_steps {
            return Err(Error::InvalidParams(format!(
                "per-step policy has {} networks for {} steps",
                nets.len(),
                model.n_steps
            )));
        }
    }

    let validation = sample_scenarios(
        model,
        cfg.eval_batch_size,
        derive_seed(cfg.seed, "validation", 0),
    );
    let mut policy = initial;
    let initial_objective = validation_objective(&policy, &validation, model, obj)?;
    let mut best_objective = initial_objective;
    let mut best_policy = policy.clone();
    let mut best_iteration = 0;
    let mut state = AdamState::new(&policy);
    let mut lr = cfg.initial_lr;
    let mut epochs_without_improvement = 0usize;
    let mut epochs_since_lr_cut = 0usize;
    // Separate reference level for plateau detection; only significant
    // improvements move it.
    let mut plateau_best = initial_objective;
    let mut iterations = Vec::with_capacity(cfg.n_batches);
    let mut stop_reason = StopReason::Exhausted;

    let fixed_batch = if cfg.fixed_dataset {
        Some(sample_scenarios(
            model,
            cfg.batch_size,
            derive_seed(cfg.seed, "train-batch", 0),
        ))
    } else {
        None
    };

    for iter in 0..cfg.n_batches {
        let fresh;
        let scenarios = match &fixed_batch {
            Some(batch) => batch,
            None => {
                fresh = sample_scenarios(
                    model,
                    cfg.batch_size,
                    derive_seed(cfg.seed, "train-batch", iter as u64),
                );
                &fresh
            }
        };
        let (loss, tape) = match episode_loss_and_grad(&policy, scenarios, model, obj) {
            Ok(pair) if pair.0.is_finite() => pair,
            _ => {
                stop_reason = StopReason::Diverged;
                break;
            }
        };
        adam_step(&mut policy, &tape, &mut state, lr);

        let mut record = IterationRecord {
            iteration: iter,
            lr,
            train_objective: -loss,
            validation_objective: None,
        };
        let epoch_end = (iter + 1) % BATCHES_PER_EPOCH == 0 || iter + 1 == cfg.n_batches;
        let mut stop_now = false;
        if epoch_end {
            let val = match validation_objective(&policy, &validation, model, obj) {
                Ok(v) if v.is_finite() => v,
                _ => {
                    stop_reason = StopReason::Diverged;
                    iterations.push(record);
                    break;
                }
            };
            record.validation_objective = Some(val);
            if val > best_objective {
                best_objective = val;
                best_policy = policy.clone();
                best_iteration = iter + 1;
                epochs_without_improvement = 0;
            } else {
                epochs_without_improvement += 1;
                if epochs_without_improvement >= cfg.early_stop_patience {
                    stop_reason = StopReason::EarlyStopped;
                    stop_now = true;
                }
            }
            if val > plateau_best + PLATEAU_REL_TOL * plateau_best.abs() {
                plateau_best = val;
                epochs_since_lr_cut = 0;
            } else {
                epochs_since_lr_cut += 1;
                if epochs_since_lr_cut >= cfg.plateau_patience && lr > cfg.min_lr {
                    lr = (lr / cfg.lr_decay_factor).max(cfg.min_lr);
                    epochs_since_lr_cut = 0;
                }
            }
        }
        progress(&record);
        iterations.push(record);
        if stop_now {
            break;
        }
    }

    let test = sample_scenarios(model, cfg.eval_batch_size, derive_seed(cfg.seed, "test", 0));
    let final_metrics = scalarized_objective(&roll_policy(model, &test, &best_policy)?, obj);
    let report = TrainReport {
        iterations,
        initial_objective,
        best_objective,
        best_iteration,
        stop_reason,
        final_lr: lr,
        final_metrics,
    };
    Ok((best_policy, report))
}

/// Train a fresh shared-network policy of the given architecture.
pub fn train(
    model: &ModelParams,
    obj: &ObjectiveParams,
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
) -> Result<(MlpPolicy, TrainReport)> {
    let initial =
        ReinsurancePolicy::Shared(init_policy(arch, derive_seed(cfg.seed, "policy-init", 0))?);
    let (policy, report) = train_policy(model, obj, initial, cfg)?;
    match policy {
        ReinsurancePolicy::Shared(net) => Ok((net, report)),
        ReinsurancePolicy::PerStep(_) => unreachable!("shared policy stays shared"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_scenarios;
    use crate::policy::Layer;

    fn small_model() -> ModelParams {
        ModelParams {
            n_steps: 4,
            time_horizon: 4.0,
            ..ModelParams::default()
        }
    }

    fn small_arch() -> MlpArchitecture {
        MlpArchitecture::with_hidden(vec![4])
    }

    /// Central finite differences over every parameter; returns the maximum
    /// relative error against the backpropagated gradient.
    fn fd_max_rel_err(
        policy: &ReinsurancePolicy,
        scenarios: &ScenarioBatch,
        model: &ModelParams,
        obj: &ObjectiveParams,
    ) -> f64 {
        let (_, tape) = episode_loss_and_grad(policy, scenarios, model, obj).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for ni in 0..policy.networks().len() {
            for li in 0..policy.networks()[ni].layers.len() {
                let n_w = policy.networks()[ni].layers[li].weights.len();
                let n_b = policy.networks()[ni].layers[li].biases.len();
                for (is_bias, count) in [(false, n_w), (true, n_b)] {
                    for k in 0..count {
                        let loss_at = |delta: f64| {
                            let mut p = policy.clone();
                            let layer = &mut p.networks_mut()[ni].layers[li];
                            if is_bias {
                                layer.biases[k] += delta;
                            } else {
                                layer.weights[k] += delta;
                            }
                            episode_loss_and_grad(&p, scenarios, model, obj).unwrap().0
                        };
                        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                        let g = &tape.nets[ni].layers[li];
                        let an = if is_bias { g.biases[k] } else { g.weights[k] };
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                        worst = worst.max(rel);
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = small_model();
        let scenarios = sample_scenarios(&model, 64, 17);
        for (seed, beta) in [(1u64, 0.0), (2, 0.4), (3, 1.0)] {
            let policy = ReinsurancePolicy::Shared(init_policy(&small_arch(), seed).unwrap());
            let obj = ObjectiveParams::new(beta, 10.0, 0.3);
            let err = fd_max_rel_err(&policy, &scenarios, &model, &obj);
            assert!(
                err < 1e-4,
                "beta={beta}: max relative gradient error {err} exceeds 1e-4"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_per_step() {
        let model = small_model();
        let scenarios = sample_scenarios(&model, 48, 23);
        let nets = (0..model.n_steps)
            .map(|k| init_policy(&small_arch(), 40 + k as u64).unwrap())
            .collect();
        let policy = ReinsurancePolicy::PerStep(nets);
        let obj = ObjectiveParams::new(0.4, 10.0, 0.3);
        let err = fd_max_rel_err(&policy, &scenarios, &model, &obj);
        assert!(err < 1e-4, "per-step gradient error {err} exceeds 1e-4");
    }

    #[test]
    fn deterministic_claims_reduce_to_terminal_utility_gradient() {
        // Zeroed claims and shocks leave a deterministic recursion; the
        // beta = 1 loss is exp(−α·X_n) and the gradient must match finite
        // differences tightly.
        let model = ModelParams {
            ou_vol: 0.0,
            ..small_model()
        };
        let mut scenarios = sample_scenarios(&model, 8, 0);
        scenarios.aggregate_claims.fill(0.0);
        scenarios.ou_noise.fill(0.0);
        let policy = ReinsurancePolicy::Shared(init_policy(&small_arch(), 9).unwrap());
        let obj = ObjectiveParams::new(1.0, 10.0, 0.3);

        let (loss, _) = episode_loss_and_grad(&policy, &scenarios, &model, &obj).unwrap();
        let batch = roll_policy(&model, &scenarios, &policy).unwrap();
        let terminal = batch.path(0)[model.n_steps];
        assert!(
            (loss - (-0.3 * terminal).exp()).abs() < 1e-12,
            "loss must equal exp(−α·X_n) on a deterministic path"
        );
        let err = fd_max_rel_err(&policy, &scenarios, &model, &obj);
        assert!(err < 1e-6, "deterministic gradient error {err}");
    }

    #[test]
    fn frozen_policy_loss_equals_forward_evaluation_exactly() {
        let model = ModelParams::default();
        let scenarios = sample_scenarios(&model, 300, 5);
        let policy = ReinsurancePolicy::Shared(MlpPolicy::zeroed(&MlpArchitecture::default()));
        let obj = ObjectiveParams::default();
        let (loss, _) = episode_loss_and_grad(&policy, &scenarios, &model, &obj).unwrap();
        let summary =
            scalarized_objective(&roll_policy(&model, &scenarios, &policy).unwrap(), &obj);
        assert_eq!(
            loss.to_bits(),
            (-summary.mean_scalarized).to_bits(),
            "tape and no-tape evaluations must agree bit for bit"
        );
    }

    #[test]
    fn flat_surrogate_has_vanishing_gradient() {
        let model = small_model();
        let scenarios = sample_scenarios(&model, 32, 2);
        let policy = ReinsurancePolicy::Shared(init_policy(&small_arch(), 4).unwrap());
        let obj = ObjectiveParams::new(0.0, 1e-12, 0.3);
        let (_, tape) = episode_loss_and_grad(&policy, &scenarios, &model, &obj).unwrap();
        assert!(
            tape.max_abs() < 1e-10,
            "a nearly constant surrogate must give a near-zero gradient, got {}",
            tape.max_abs()
        );
    }

    #[test]
    fn episode_is_bit_identical_across_thread_counts() {
        let model = ModelParams::default();
        let scenarios = sample_scenarios(&model, 1000, 13);
        let policy = ReinsurancePolicy::Shared(init_policy(&small_arch(), 7).unwrap());
        let obj = ObjectiveParams::default();
        let run = || episode_loss_and_grad(&policy, &scenarios, &model, &obj).unwrap();
        let (l1, t1) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let (l4, t4) = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(t1, t4);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut policy = ReinsurancePolicy::Shared(init_policy(&small_arch(), 1).unwrap());
        let reference = policy.clone();
        let zeros = GradientTape::zeros_like(&policy);
        let mut state = AdamState::new(&policy);
        adam_step(&mut policy, &zeros, &mut state, 0.1);
        assert_eq!(policy, reference, "zero gradient must not move parameters");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // Two-parameter toy: with bias correction the first update is
        // lr·g/(|g| + ε) per coordinate.
        let arch = MlpArchitecture::with_hidden(vec![1]);
        let layers = vec![
            Layer {
                weights: vec![1.0],
                biases: vec![0.0],
            },
            Layer {
                weights: vec![-2.0],
                biases: vec![0.0],
            },
        ];
        let mut policy = ReinsurancePolicy::Shared(MlpPolicy::from_parts(arch, layers).unwrap());
        let mut grad = GradientTape::zeros_like(&policy);
        grad.nets[0].layers[0].weights[0] = 0.5;
        grad.nets[0].layers[1].weights[0] = -1.0;
        let mut state = AdamState::new(&policy);
        let lr = 0.01;
        adam_step(&mut policy, &grad, &mut state, lr);

        let expect = |p0: f64, g: f64| {
            let m_hat = (0.1 * g) / (1.0 - 0.9);
            let v_hat = (0.001 * g * g) / (1.0 - 0.999);
            p0 - lr * m_hat / (v_hat.sqrt() + 1e-8)
        };
        let net = &policy.networks()[0];
        assert!((net.layers[0].weights[0] - expect(1.0, 0.5)).abs() < 1e-15);
        assert!((net.layers[1].weights[0] - expect(-2.0, -1.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = ReinsurancePolicy::Shared(init_policy(&small_arch(), 6).unwrap());
        let mut b = a.clone();
        let mut grad = GradientTape::zeros_like(&a);
        grad.nets[0].layers[0].weights[2] = 0.3;
        grad.nets[0].layers[1].biases[0] = -0.7;
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        for _ in 0..5 {
            adam_step(&mut a, &grad, &mut sa, 1e-3);
            adam_step(&mut b, &grad, &mut sb, 1e-3);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn training_improves_over_initial_policy() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let cfg = TrainConfig {
            n_batches: 60,
            batch_size: 512,
            eval_batch_size: 4096,
            seed: 11,
            ..TrainConfig::default()
        };
        let (_, report) = train(&model, &obj, &small_arch(), &cfg).unwrap();
        assert!(
            report.best_objective > report.initial_objective,
            "best {} must strictly improve on initial {}",
            report.best_objective,
            report.initial_objective
        );
        // The recorded best is exactly the maximum over the validation trace
        // (or the initial objective, if nothing beat it).
        let trace_best = report
            .iterations
            .iter()
            .filter_map(|r| r.validation_objective)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(
            report.best_objective,
            trace_best.max(report.initial_objective)
        );
    }

    #[test]
    fn training_is_reproducible() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let cfg = TrainConfig {
            n_batches: 20,
            batch_size: 256,
            eval_batch_size: 1024,
            seed: 3,
            ..TrainConfig::default()
        };
        let (p1, r1) = train(&model, &obj, &small_arch(), &cfg).unwrap();
        let (p2, r2) = train(&model, &obj, &small_arch(), &cfg).unwrap();
        assert_eq!(p1, p2, "same config must reproduce the same policy");
        assert_eq!(r1.best_objective.to_bits(), r2.best_objective.to_bits());
        assert_eq!(r1.iterations.len(), r2.iterations.len());
    }

    #[test]
    fn fixed_dataset_mode_runs_to_exhaustion() {
        let model = ModelParams::default();
        let obj = ObjectiveParams::default();
        let cfg = TrainConfig {
            n_batches: 12,
            batch_size: 128,
            eval_batch_size: 512,
            seed: 8,
            fixed_dataset: true,
            ..TrainConfig::default()
        };
        let (_, report) = train(&model, &obj, &small_arch(), &cfg).unwrap();
        assert_eq!(report.iterations.len(), 12);
        assert_eq!(report.stop_reason, StopReason::Exhausted);
    }
}
