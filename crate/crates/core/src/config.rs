//! Run configuration: a flat key = value file format, scale presets, override
//! precedence (flags over file over defaults), and the resolved-settings
//! record echoed into every run directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::ObjectiveParams;
use crate::policy::MlpArchitecture;
use crate::seed::derive_seed;
use crate::train::TrainConfig;

/// Experiment scale: `desk` runs in minutes, `paper` reproduces the full
/// protocol sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn parse(raw: &str) -> Result<Scale> {
        match raw {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!(
                "scale must be `desk` or `paper`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    /// Training protocol at this scale. Desk shrinks the batch size and
    /// caps the batch count; paper uses the full schedule. The desk cap
    /// leaves room for the learning-rate decay phases: the retention shape
    /// keeps moving well past the point where the objective looks flat.
    pub fn default_training(self) -> TrainConfig {
        match self {
            Scale::Desk => TrainConfig {
                n_batches: 1600,
                batch_size: 1 << 12,
                ..TrainConfig::default()
            },
            Scale::Paper => TrainConfig::default(),
        }
    }

    /// Paths for pure Monte Carlo estimates (baseline, surrogate sweep).
    pub fn default_mc_paths(self) -> usize {
        match self {
            Scale::Desk => 1 << 22,
            Scale::Paper => 1 << 25,
        }
    }

    /// Paths for the shared test stream of policy evaluations.
    pub fn default_test_paths(self) -> usize {
        match self {
            Scale::Desk => 1 << 20,
            Scale::Paper => 1 << 25,
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams,
    pub objective: ObjectiveParams,
    pub architecture: MlpArchitecture,
    pub training: TrainConfig,
    pub scale: Scale,
    /// Master seed; every purpose derives its own stream from it.
    pub seed: u64,
    /// Train one network per renegotiation date instead of a shared one.
    pub per_step_networks: bool,
    /// Explicit Monte Carlo size; falls back to the scale default of the
    /// invoked command when absent.
    pub eval_m: Option<usize>,
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub output_dir: PathBuf,
}

/// Keys accepted in config files and as CLI overrides.
pub const VALID_KEYS: &[&str] = &[
    "initial_wealth",
    "time_horizon",
    "n_steps",
    "lambda",
    "mu",
    "eta",
    "theta",
    "alpha",
    "beta",
    "gamma",
    "kappa",
    "xi",
    "nu",
    "hidden_layers",
    "per_step_networks",
    "n_batches",
    "batch_size",
    "initial_lr",
    "plateau_patience",
    "lr_decay_factor",
    "min_lr",
    "early_stop_patience",
    "eval_batch_size",
    "fixed_dataset",
    "eval_m",
    "gammas",
    "betas",
    "grid_min",
    "grid_max",
    "grid_step",
    "seed",
    "scale",
];

/// Informational keys a run record carries beyond the config proper; ignored
/// on load so a manifest can be fed back as a config file.
const RECORD_KEYS: &[&str] = &["command", "version", "timestamp"];

impl RunConfig {
    /// Base-model defaults at the given scale.
    pub fn with_scale(scale: Scale) -> RunConfig {
        RunConfig {
            model: ModelParams::default(),
            objective: ObjectiveParams::default(),
            architecture: MlpArchitecture::default(),
            training: scale.default_training(),
            scale,
            seed: 0,
            per_step_networks: false,
            eval_m: None,
            gammas: vec![1.0, 10.0, 100.0, 1000.0, 10000.0],
            betas: (0..=10).map(|k| k as f64 / 10.0).collect(),
            grid_min: crate::experiments::DEFAULT_GRID_MIN,
            grid_max: crate::experiments::DEFAULT_GRID_MAX,
            grid_step: crate::experiments::DEFAULT_GRID_STEP,
            output_dir: PathBuf::from("out"),
        }
    }

    /// Monte Carlo size for baseline and surrogate-sweep estimates.
    pub fn mc_paths(&self) -> usize {
        self.eval_m.unwrap_or_else(|| self.scale.default_mc_paths())
    }

    /// Size of the shared test stream for policy evaluation.
    pub fn test_paths(&self) -> usize {
        self.eval_m.unwrap_or_else(|| self.scale.default_test_paths())
    }

    /// Apply one `key = value` setting given as strings.
    pub fn apply_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "initial_wealth" => self.model.initial_wealth = parse_f64(key, raw)?,
            "time_horizon" => self.model.time_horizon = parse_f64(key, raw)?,
            "n_steps" => self.model.n_steps = parse_usize(key, raw)?,
            "lambda" => self.model.claim_intensity = parse_f64(key, raw)?,
            "mu" => self.model.mean_claim = parse_f64(key, raw)?,
            "eta" => self.model.insurer_loading = parse_f64(key, raw)?,
            "theta" => self.model.reinsurer_loading = parse_f64(key, raw)?,
            "alpha" => {
                let alpha = parse_f64(key, raw)?;
                self.model.risk_aversion = alpha;
                self.objective =
                    ObjectiveParams::new(self.objective.beta, self.objective.gamma, alpha);
            }
            "beta" => self.objective.beta = parse_f64(key, raw)?,
            "gamma" => self.objective.gamma = parse_f64(key, raw)?,
            "kappa" => {
                // The perturbation starts at its mean-reversion level.
                let kappa = parse_f64(key, raw)?;
                self.model.ou_level = kappa;
                self.model.ou_initial = kappa;
            }
            "xi" => self.model.ou_speed = parse_f64(key, raw)?,
            "nu" => self.model.ou_vol = parse_f64(key, raw)?,
            "hidden_layers" => {
                self.architecture.hidden_layers = parse_usize_list(key, raw)?;
            }
            "per_step_networks" => self.per_step_networks = parse_bool(key, raw)?,
            "n_batches" => self.training.n_batches = parse_usize(key, raw)?,
            "batch_size" => self.training.batch_size = parse_usize(key, raw)?,
            "initial_lr" => self.training.initial_lr = parse_f64(key, raw)?,
            "plateau_patience" => self.training.plateau_patience = parse_usize(key, raw)?,
            "lr_decay_factor" => self.training.lr_decay_factor = parse_f64(key, raw)?,
            "min_lr" => self.training.min_lr = parse_f64(key, raw)?,
            "early_stop_patience" => self.training.early_stop_patience = parse_usize(key, raw)?,
            "eval_batch_size" => self.training.eval_batch_size = parse_usize(key, raw)?,
            "fixed_dataset" => self.training.fixed_dataset = parse_bool(key, raw)?,
            "eval_m" => self.eval_m = Some(parse_usize(key, raw)?),
            "gammas" => self.gammas = parse_f64_list(key, raw)?,
            "betas" => self.betas = parse_f64_list(key, raw)?,
            "grid_min" => self.grid_min = parse_f64(key, raw)?,
            "grid_max" => self.grid_max = parse_f64(key, raw)?,
            "grid_step" => self.grid_step = parse_f64(key, raw)?,
            "seed" => self.seed = parse_u64(key, raw)?,
            "scale" => self.scale = Scale::parse(raw)?,
            unknown => {
                return Err(Error::Config(format!(
                    "unknown config key `{unknown}`; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.architecture.validate()?;
        self.training.validate()?;
        if self.betas.is_empty() || self.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("betas must be a nonempty list in [0, 1]".into()));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::Config("gammas must be a nonempty positive list".into()));
        }
        if !(self.grid_step > 0.0) || self.grid_max < self.grid_min {
            return Err(Error::Config("retention grid bounds must be ordered".into()));
        }
        if self.eval_m == Some(0) {
            return Err(Error::Config("eval_m must be at least 1".into()));
        }
        Ok(())
    }

    /// Render the resolved settings as a reloadable flat key = value file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("scale", format!("\"{}\"", self.scale.as_str()));
        kv("seed", self.seed.to_string());
        kv("initial_wealth", self.model.initial_wealth.to_string());
        kv("time_horizon", self.model.time_horizon.to_string());
        kv("n_steps", self.model.n_steps.to_string());
        kv("lambda", self.model.claim_intensity.to_string());
        kv("mu", self.model.mean_claim.to_string());
        kv("eta", self.model.insurer_loading.to_string());
        kv("theta", self.model.reinsurer_loading.to_string());
        kv("alpha", self.model.risk_aversion.to_string());
        kv("beta", self.objective.beta.to_string());
        kv("gamma", self.objective.gamma.to_string());
        kv("kappa", self.model.ou_level.to_string());
        kv("xi", self.model.ou_speed.to_string());
        kv("nu", self.model.ou_vol.to_string());
        kv(
            "hidden_layers",
            format!("\"{}\"", join_list(self.architecture.hidden_layers.iter())),
        );
        kv("per_step_networks", self.per_step_networks.to_string());
        kv("n_batches", self.training.n_batches.to_string());
        kv("batch_size", self.training.batch_size.to_string());
        kv("initial_lr", self.training.initial_lr.to_string());
        kv("plateau_patience", self.training.plateau_patience.to_string());
        kv("lr_decay_factor", self.training.lr_decay_factor.to_string());
        kv("min_lr", self.training.min_lr.to_string());
        kv(
            "early_stop_patience",
            self.training.early_stop_patience.to_string(),
        );
        kv("eval_batch_size", self.training.eval_batch_size.to_string());
        kv("fixed_dataset", self.training.fixed_dataset.to_string());
        if let Some(m) = self.eval_m {
            kv("eval_m", m.to_string());
        }
        kv("gammas", format!("\"{}\"", join_list(self.gammas.iter())));
        kv("betas", format!("\"{}\"", join_list(self.betas.iter())));
        kv("grid_min", self.grid_min.to_string());
        kv("grid_max", self.grid_max.to_string());
        kv("grid_step", self.grid_step.to_string());
        out
    }

    /// Seed for the training loop, derived off the master so other
    /// experiments keep their streams.
    pub fn training_seed(&self) -> u64 {
        derive_seed(self.seed, "train", 0)
    }
}

fn join_list<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64(key: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got `{raw}`")))
}

fn parse_usize(key: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got `{raw}`")))
}

fn parse_u64(key: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got `{raw}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got `{raw}`"
        ))),
    }
}

fn parse_usize_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

fn parse_f64_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|part| parse_f64(key, part.trim()))
        .collect()
}

/// Stringify a TOML scalar or flat array for the common key parser.
fn value_to_string(key: &str, value: &toml::Value) -> Result<String> {
    use toml::Value;
    Ok(match value {
        Value::Integer(v) => v.to_string(),
        Value::Float(v) => v.to_string(),
        Value::Boolean(v) => v.to_string(),
        Value::String(v) => v.clone(),
        Value::Array(items) => {
            let parts: Result<Vec<String>> = items
                .iter()
                .map(|item| match item {
                    Value::Array(_) | Value::Table(_) => Err(Error::Config(format!(
                        "{key}: nested values are not supported"
                    ))),
                    other => value_to_string(key, other),
                })
                .collect();
            parts?.join(",")
        }
        Value::Table(_) | Value::Datetime(_) => {
            return Err(Error::Config(format!("{key}: unsupported value type")))
        }
    })
}

/// Load a configuration: scale-dependent defaults, then file values, then
/// command-line overrides, each later layer winning.
///
/// Unknown keys are rejected with the list of valid ones. The informational
/// keys a run record adds (`command`, `version`, `timestamp`) are ignored so
/// a written manifest can be replayed directly.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let table: Option<toml::Table> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            Some(text.parse::<toml::Table>().map_err(|e| {
                Error::Config(format!("cannot parse config {}: {e}", path.display()))
            })?)
        }
        None => None,
    };
    if let Some(table) = &table {
        for key in table.keys() {
            if !VALID_KEYS.contains(&key.as_str()) && !RECORD_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    VALID_KEYS.join(", ")
                )));
            }
        }
    }

    // Scale first: it decides the defaults every other key lands on.
    let mut scale = Scale::Desk;
    if let Some(table) = &table {
        if let Some(v) = table.get("scale") {
            scale = Scale::parse(&value_to_string("scale", v)?)?;
        }
    }
    for (key, raw) in overrides {
        if key == "scale" {
            scale = Scale::parse(raw.trim())?;
        }
    }

    let mut config = RunConfig::with_scale(scale);
    if let Some(table) = &table {
        for (key, value) in table {
            if key == "scale" || RECORD_KEYS.contains(&key.as_str()) {
                continue;
            }
            config.apply_str(key, &value_to_string(key, value)?)?;
        }
    }
    for (key, raw) in overrides {
        if key == "scale" {
            continue;
        }
        config.apply_str(key, raw)?;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(contents: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(contents.as_bytes()).unwrap();
        file
    }

    #[test]
    fn empty_config_gives_base_model_defaults() {
        let config = load_config(None, &[]).unwrap();
        assert_eq!(config.model.initial_wealth, 1.0);
        assert_eq!(config.model.time_horizon, 10.0);
        assert_eq!(config.model.n_steps, 10);
        assert_eq!(config.model.claim_intensity, 1.0);
        assert_eq!(config.model.mean_claim, 1.0);
        assert_eq!(config.model.insurer_loading, 0.5);
        assert_eq!(config.model.reinsurer_loading, 0.7);
        assert_eq!(config.model.risk_aversion, 0.3);
        assert_eq!(config.objective.beta, 0.4);
        assert_eq!(config.objective.gamma, 10.0);
        assert_eq!(config.model.ou_level, 0.0);
        assert_eq!(config.model.ou_speed, 0.2);
        assert_eq!(config.model.ou_vol, 0.05);
        assert_eq!(config.architecture.hidden_layers, vec![32, 32]);
        assert_eq!(config.scale, Scale::Desk);
        assert_eq!(config.training.n_batches, 1600);
        assert_eq!(config.training.batch_size, 1 << 12);
    }

    #[test]
    fn invalid_loading_order_is_rejected_by_name() {
        let file = write_config("theta = 0.4\neta = 0.5\n");
        let err = load_config(Some(file.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("theta must exceed eta"), "got: {err}");
    }

    #[test]
    fn flags_override_file_values() {
        let file = write_config("beta = 0.4\nlambda = 2.0\n");
        let config = load_config(
            Some(file.path()),
            &[("beta".to_string(), "1.0".to_string())],
        )
        .unwrap();
        assert_eq!(config.objective.beta, 1.0, "flag wins over file");
        assert_eq!(config.model.claim_intensity, 2.0, "file wins over default");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let file = write_config("lambada = 1.0\n");
        let err = load_config(Some(file.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("unknown config key `lambada`"));
        assert!(err.contains("lambda"), "error must list valid keys");
    }

    #[test]
    fn paper_scale_switches_training_defaults() {
        let config = load_config(None, &[("scale".to_string(), "paper".to_string())]).unwrap();
        assert_eq!(config.training.n_batches, 2000);
        assert_eq!(config.training.batch_size, 1 << 14);
        assert_eq!(config.mc_paths(), 1 << 25);
        // Explicit values still beat the scale defaults.
        let config = load_config(
            None,
            &[
                ("scale".to_string(), "paper".to_string()),
                ("n_batches".to_string(), "7".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(config.training.n_batches, 7);
    }

    #[test]
    fn kappa_sets_the_initial_perturbation_level() {
        let config = load_config(None, &[("kappa".to_string(), "0.3".to_string())]).unwrap();
        assert_eq!(config.model.ou_level, 0.3);
        assert_eq!(config.model.ou_initial, 0.3);
    }

    #[test]
    fn alpha_updates_objective_and_wealth_floor() {
        let config = load_config(None, &[("alpha".to_string(), "0.5".to_string())]).unwrap();
        assert_eq!(config.model.risk_aversion, 0.5);
        assert_eq!(config.objective.risk_aversion, 0.5);
        assert_eq!(config.objective.wealth_floor, -1400.0);
    }

    #[test]
    fn hidden_layers_accepts_arrays_and_comma_lists() {
        let file = write_config("hidden_layers = [16, 8]\n");
        let config = load_config(Some(file.path()), &[]).unwrap();
        assert_eq!(config.architecture.hidden_layers, vec![16, 8]);
        let config = load_config(
            None,
            &[("hidden_layers".to_string(), "4, 4, 4".to_string())],
        )
        .unwrap();
        assert_eq!(config.architecture.hidden_layers, vec![4, 4, 4]);
    }

    #[test]
    fn rendered_config_reloads_to_the_same_settings() {
        let mut config = load_config(None, &[]).unwrap();
        config.apply_str("beta", "0.7").unwrap();
        config.apply_str("seed", "1234").unwrap();
        config.apply_str("hidden_layers", "8,4").unwrap();
        config.apply_str("eval_m", "4096").unwrap();
        let file = write_config(&config.render());
        let reloaded = load_config(Some(file.path()), &[]).unwrap();
        assert_eq!(config, reloaded);
    }

    #[test]
    fn record_keys_are_ignored_on_load() {
        let file = write_config("command = \"baseline\"\nversion = \"0.1.0\"\nlambda = 1.5\n");
        let config = load_config(Some(file.path()), &[]).unwrap();
        assert_eq!(config.model.claim_intensity, 1.5);
    }
}
