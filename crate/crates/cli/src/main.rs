//! Command-line entry points for the reinsurance experiments: baseline ruin
//! estimation, the surrogate sharpness sweep, policy training, retention
//! curve export, and the trade-off frontier sweep.

mod output;

use std::fs;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use output::{format_real, write_atomic, Csv};
use reinopt::config::{load_config, RunConfig};
use reinopt::experiments::{
    baseline_ruin, extract_retention_curve, gamma_sweep, pareto_sweep, surplus_grid,
    surrogate_curve_samples,
};
use reinopt::policy::{
    init_policy, load_checkpoint, save_checkpoint, ReinsurancePolicy,
};
use reinopt::seed::derive_seed;
use reinopt::train::{train_policy_with_progress, TrainReport};

#[derive(Parser)]
#[command(
    name = "reinopt",
    version,
    about = "Optimal proportional reinsurance via trained feedback policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo ruin probability without reinsurance
    Baseline,
    /// Expected surrogate loss against the exact ruin probability across
    /// sharpness values
    GammaSweep,
    /// Train one policy at the configured beta and checkpoint it
    Train,
    /// Sample a trained policy's retention rule on a surplus grid
    RetentionCurve {
        /// Policy checkpoint to sample
        #[arg(long, value_name = "PATH")]
        policy: PathBuf,
    },
    /// Trade-off frontier: one trained policy per beta, evaluated on a
    /// shared test stream
    Pareto,
}

/// Global flags; per-parameter overrides are named after config keys and
/// beat both file values and defaults.
#[derive(Args)]
struct Common {
    /// Flat key = value config file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every experiment derives its own stream from it
    #[arg(long, global = true, value_name = "N")]
    seed: Option<String>,
    /// Output directory for CSVs, checkpoints, and the run record
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Experiment scale: desk (fast) or paper (full protocol)
    #[arg(long, global = true, value_name = "desk|paper")]
    scale: Option<String>,

    #[arg(long, global = true, alias = "initial_wealth", value_name = "X", help_heading = "Model overrides")]
    initial_wealth: Option<String>,
    #[arg(long, global = true, alias = "time_horizon", value_name = "T", help_heading = "Model overrides")]
    time_horizon: Option<String>,
    #[arg(long, global = true, alias = "n_steps", value_name = "N", help_heading = "Model overrides")]
    n_steps: Option<String>,
    #[arg(long, global = true, value_name = "RATE", help_heading = "Model overrides")]
    lambda: Option<String>,
    #[arg(long, global = true, value_name = "MEAN", help_heading = "Model overrides")]
    mu: Option<String>,
    #[arg(long, global = true, value_name = "LOAD", help_heading = "Model overrides")]
    eta: Option<String>,
    #[arg(long, global = true, value_name = "LOAD", help_heading = "Model overrides")]
    theta: Option<String>,
    #[arg(long, global = true, value_name = "A", help_heading = "Model overrides")]
    alpha: Option<String>,
    #[arg(long, global = true, value_name = "B", help_heading = "Objective overrides")]
    beta: Option<String>,
    #[arg(long, global = true, value_name = "G", help_heading = "Objective overrides")]
    gamma: Option<String>,
    #[arg(long, global = true, value_name = "K", help_heading = "Model overrides")]
    kappa: Option<String>,
    #[arg(long, global = true, value_name = "XI", help_heading = "Model overrides")]
    xi: Option<String>,
    #[arg(long, global = true, value_name = "NU", help_heading = "Model overrides")]
    nu: Option<String>,

    #[arg(long, global = true, alias = "hidden_layers", value_name = "W,W,…", help_heading = "Network overrides")]
    hidden_layers: Option<String>,
    #[arg(long, global = true, alias = "per_step_networks", value_name = "BOOL", help_heading = "Network overrides")]
    per_step_networks: Option<String>,

    #[arg(long, global = true, alias = "n_batches", value_name = "N", help_heading = "Training overrides")]
    n_batches: Option<String>,
    #[arg(long, global = true, alias = "batch_size", value_name = "M", help_heading = "Training overrides")]
    batch_size: Option<String>,
    #[arg(long, global = true, alias = "initial_lr", value_name = "LR", help_heading = "Training overrides")]
    initial_lr: Option<String>,
    #[arg(long, global = true, alias = "plateau_patience", value_name = "EPOCHS", help_heading = "Training overrides")]
    plateau_patience: Option<String>,
    #[arg(long, global = true, alias = "lr_decay_factor", value_name = "F", help_heading = "Training overrides")]
    lr_decay_factor: Option<String>,
    #[arg(long, global = true, alias = "min_lr", value_name = "LR", help_heading = "Training overrides")]
    min_lr: Option<String>,
    #[arg(long, global = true, alias = "early_stop_patience", value_name = "EPOCHS", help_heading = "Training overrides")]
    early_stop_patience: Option<String>,
    #[arg(long, global = true, alias = "eval_batch_size", value_name = "M", help_heading = "Training overrides")]
    eval_batch_size: Option<String>,
    #[arg(long, global = true, alias = "fixed_dataset", value_name = "BOOL", help_heading = "Training overrides")]
    fixed_dataset: Option<String>,

    #[arg(long, global = true, alias = "eval_m", value_name = "M", help_heading = "Experiment overrides")]
    eval_m: Option<String>,
    #[arg(long, global = true, value_name = "G,G,…", help_heading = "Experiment overrides")]
    gammas: Option<String>,
    #[arg(long, global = true, value_name = "B,B,…", help_heading = "Experiment overrides")]
    betas: Option<String>,
    #[arg(long, global = true, alias = "grid_min", value_name = "X", help_heading = "Experiment overrides")]
    grid_min: Option<String>,
    #[arg(long, global = true, alias = "grid_max", value_name = "X", help_heading = "Experiment overrides")]
    grid_max: Option<String>,
    #[arg(long, global = true, alias = "grid_step", value_name = "DX", help_heading = "Experiment overrides")]
    grid_step: Option<String>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v.clone()));
            }
        };
        push("seed", &self.seed);
        push("scale", &self.scale);
        push("initial_wealth", &self.initial_wealth);
        push("time_horizon", &self.time_horizon);
        push("n_steps", &self.n_steps);
        push("lambda", &self.lambda);
        push("mu", &self.mu);
        push("eta", &self.eta);
        push("theta", &self.theta);
        push("alpha", &self.alpha);
        push("beta", &self.beta);
        push("gamma", &self.gamma);
        push("kappa", &self.kappa);
        push("xi", &self.xi);
        push("nu", &self.nu);
        push("hidden_layers", &self.hidden_layers);
        push("per_step_networks", &self.per_step_networks);
        push("n_batches", &self.n_batches);
        push("batch_size", &self.batch_size);
        push("initial_lr", &self.initial_lr);
        push("plateau_patience", &self.plateau_patience);
        push("lr_decay_factor", &self.lr_decay_factor);
        push("min_lr", &self.min_lr);
        push("early_stop_patience", &self.early_stop_patience);
        push("eval_batch_size", &self.eval_batch_size);
        push("fixed_dataset", &self.fixed_dataset);
        push("eval_m", &self.eval_m);
        push("gammas", &self.gammas);
        push("betas", &self.betas);
        push("grid_min", &self.grid_min);
        push("grid_max", &self.grid_max);
        push("grid_step", &self.grid_step);
        out
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = load_config(cli.common.config.as_deref(), &cli.common.overrides())?;
    if let Some(out) = &cli.common.out {
        config.output_dir = out.clone();
    }
    fs::create_dir_all(&config.output_dir).with_context(|| {
        format!(
            "cannot create output directory {}",
            config.output_dir.display()
        )
    })?;

    match &cli.command {
        Command::Baseline => run_baseline(&mut config),
        Command::GammaSweep => run_gamma_sweep(&mut config),
        Command::Train => run_train(&mut config),
        Command::RetentionCurve { policy } => run_retention_curve(&mut config, policy),
        Command::Pareto => run_pareto(&mut config),
    }
}

/// The run record: the fully resolved (reloadable) config plus command,
/// version, and the only timestamp any output carries.
fn write_manifest(config: &RunConfig, command: &str) -> Result<()> {
    let mut record = config.render();
    record.push_str(&format!("command = \"{command}\"\n"));
    record.push_str(&format!("version = \"{}\"\n", env!("CARGO_PKG_VERSION")));
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    record.push_str(&format!("timestamp = {now}\n"));
    write_atomic(&config.output_dir, "manifest.txt", &record)?;
    Ok(())
}

fn run_baseline(config: &mut RunConfig) -> Result<()> {
    let m = config.mc_paths();
    config.eval_m = Some(m);
    let seed = derive_seed(config.seed, "baseline", 0);
    let (ruin, stderr) = baseline_ruin(&config.model, m, seed)?;
    let mut csv = Csv::new("m,ruin_prob,stderr");
    csv.row(&[m.to_string(), format_real(ruin), format_real(stderr)]);
    write_atomic(&config.output_dir, "baseline.csv", csv.contents())?;
    write_manifest(config, "baseline")?;
    eprintln!("baseline: ruin probability {ruin:.6} ± {stderr:.6} on {m} paths");
    Ok(())
}

fn run_gamma_sweep(config: &mut RunConfig) -> Result<()> {
    let m = config.mc_paths();
    config.eval_m = Some(m);
    let seed = derive_seed(config.seed, "gamma-sweep", 0);
    let sweep = gamma_sweep(&config.model, &config.gammas, m, seed)?;
    let mut csv = Csv::new("gamma,surrogate_mean,exact,stderr");
    for (gamma, mean) in sweep.gammas.iter().zip(&sweep.surrogate_means) {
        csv.row(&[
            format_real(*gamma),
            format_real(*mean),
            format_real(sweep.exact_ruin_prob),
            format_real(sweep.mc_stderr),
        ]);
    }
    write_atomic(&config.output_dir, "gamma_sweep.csv", csv.contents())?;

    let mut curves = Csv::new("gamma,x,g");
    for sample in surrogate_curve_samples(&config.gammas, -3.0, 3.0, 0.05) {
        curves.row(&[
            format_real(sample.gamma),
            format_real(sample.x),
            format_real(sample.value),
        ]);
    }
    write_atomic(&config.output_dir, "surrogate_curves.csv", curves.contents())?;
    write_manifest(config, "gamma-sweep")?;
    eprintln!(
        "gamma-sweep: exact ruin {:.6} ± {:.6} on {m} paths; {} gamma values",
        sweep.exact_ruin_prob,
        sweep.mc_stderr,
        sweep.gammas.len()
    );
    Ok(())
}

fn initial_policy(config: &RunConfig, train_seed: u64) -> Result<ReinsurancePolicy> {
    Ok(if config.per_step_networks {
        let nets = (0..config.model.n_steps)
            .map(|k| {
                init_policy(
                    &config.architecture,
                    derive_seed(train_seed, "policy-init", k as u64),
                )
            })
            .collect::<reinopt::Result<Vec<_>>>()?;
        ReinsurancePolicy::PerStep(nets)
    } else {
        ReinsurancePolicy::Shared(init_policy(
            &config.architecture,
            derive_seed(train_seed, "policy-init", 0),
        )?)
    })
}

fn save_checkpoint_atomic(
    config: &RunConfig,
    name: &str,
    policy: &ReinsurancePolicy,
) -> Result<PathBuf> {
    let tmp = config.output_dir.join(format!(".{name}.tmp"));
    save_checkpoint(policy, &tmp)?;
    let final_path = config.output_dir.join(name);
    fs::rename(&tmp, &final_path)
        .with_context(|| format!("renaming into {}", final_path.display()))?;
    Ok(final_path)
}

fn train_log_csv(report: &TrainReport) -> String {
    let mut csv = Csv::new("iteration,lr,train_objective,validation_objective");
    for rec in &report.iterations {
        csv.row(&[
            rec.iteration.to_string(),
            format_real(rec.lr),
            format_real(rec.train_objective),
            rec.validation_objective.map(format_real).unwrap_or_default(),
        ]);
    }
    csv.contents().to_string()
}

fn train_summary(report: &TrainReport, policy: &ReinsurancePolicy) -> String {
    let m = &report.final_metrics;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("stop_reason", format!("\"{}\"", report.stop_reason));
    kv("iterations_run", report.iterations.len().to_string());
    kv("best_iteration", report.best_iteration.to_string());
    kv("initial_objective", format_real(report.initial_objective));
    kv("best_objective", format_real(report.best_objective));
    kv("final_lr", format_real(report.final_lr));
    kv("parameter_count", policy.parameter_count().to_string());
    kv("test_paths", m.n_paths.to_string());
    kv("test_scalarized", format_real(m.mean_scalarized));
    kv("test_expected_utility", format_real(m.mean_utility));
    kv("test_utility_stderr", format_real(m.utility_stderr));
    kv("test_ruin_prob", format_real(m.ruin_prob));
    kv("test_ruin_stderr", format_real(m.ruin_stderr));
    kv("test_surrogate", format_real(m.mean_surrogate));
    s
}

fn run_train(config: &mut RunConfig) -> Result<()> {
    let mut tc = config.training.clone();
    tc.seed = config.training_seed();
    let initial = initial_policy(config, tc.seed)?;
    eprintln!(
        "train: beta {} | {} batches of {} | {} parameters",
        config.objective.beta,
        tc.n_batches,
        tc.batch_size,
        initial.parameter_count()
    );
    let (policy, report) = train_policy_with_progress(
        &config.model,
        &config.objective,
        initial,
        &tc,
        |rec| {
            if let Some(val) = rec.validation_objective {
                eprintln!(
                    "  batch {:>5} | lr {:.1e} | train {:+.6} | validation {:+.6}",
                    rec.iteration + 1,
                    rec.lr,
                    rec.train_objective,
                    val
                );
            }
        },
    )?;
    save_checkpoint_atomic(config, "policy.bin", &policy)?;
    write_atomic(&config.output_dir, "train_log.csv", &train_log_csv(&report))?;
    write_atomic(
        &config.output_dir,
        "train_summary.txt",
        &train_summary(&report, &policy),
    )?;
    write_manifest(config, "train")?;
    eprintln!(
        "train: {} after {} batches | best validation {:+.6} | test ruin {:.6}",
        report.stop_reason,
        report.iterations.len(),
        report.best_objective,
        report.final_metrics.ruin_prob
    );
    Ok(())
}

fn run_retention_curve(config: &mut RunConfig, policy_path: &PathBuf) -> Result<()> {
    let policy = load_checkpoint(policy_path)?;
    let net = match &policy {
        ReinsurancePolicy::Shared(net) => net,
        ReinsurancePolicy::PerStep(_) => bail!(
            "retention curves are defined for shared policies; {} holds one network per step",
            policy_path.display()
        ),
    };
    let grid = surplus_grid(config.grid_min, config.grid_max, config.grid_step);
    let curve = extract_retention_curve(net, &grid, config.objective.beta);
    let mut csv = Csv::new("beta,x,b");
    for (x, b) in curve.surplus_grid.iter().zip(&curve.retention_values) {
        csv.row(&[format_real(curve.beta), format_real(*x), format_real(*b)]);
    }
    write_atomic(&config.output_dir, "retention_curves.csv", csv.contents())?;
    write_manifest(config, "retention-curve")?;
    eprintln!(
        "retention-curve: {} grid points from {} to {}",
        grid.len(),
        config.grid_min,
        config.grid_max
    );
    Ok(())
}

fn run_pareto(config: &mut RunConfig) -> Result<()> {
    let test_m = config.test_paths();
    config.eval_m = Some(test_m);
    let mut tc = config.training.clone();
    tc.seed = derive_seed(config.seed, "pareto", 0);
    eprintln!(
        "pareto: {} weights | {} batches of {} each | shared test stream of {} paths",
        config.betas.len(),
        tc.n_batches,
        tc.batch_size,
        test_m
    );
    let sweep = pareto_sweep(
        &config.model,
        &config.objective,
        &config.architecture,
        &tc,
        &config.betas,
        test_m,
        |k, beta, report| {
            eprintln!(
                "  weight {:>2}: beta {:<4} {} | best validation {:+.6}",
                k, beta, report.stop_reason, report.best_objective
            );
        },
    )?;

    let mut csv = Csv::new("beta,expected_utility,survival_prob,ruin_prob,surrogate");
    for (point, policy) in sweep.points.iter().zip(&sweep.policies) {
        save_checkpoint_atomic(config, &format!("{}.bin", point.policy_checkpoint_id), policy)?;
        csv.row(&[
            format_real(point.beta),
            format_real(point.expected_utility),
            format_real(1.0 - point.ruin_probability),
            format_real(point.ruin_probability),
            format_real(point.surrogate_loss),
        ]);
    }
    // The no-reinsurance reference carries an empty beta cell.
    csv.row(&[
        String::new(),
        format_real(sweep.baseline.mean_utility),
        format_real(1.0 - sweep.baseline.ruin_prob),
        format_real(sweep.baseline.ruin_prob),
        format_real(sweep.baseline.mean_surrogate),
    ]);
    write_atomic(&config.output_dir, "pareto.csv", csv.contents())?;
    write_manifest(config, "pareto")?;
    eprintln!(
        "pareto: {} trained points + baseline written; baseline ruin {:.6}",
        sweep.points.len(),
        sweep.baseline.ruin_prob
    );
    Ok(())
}
