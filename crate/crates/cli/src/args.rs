//! Command-line flags and their JSON config-file mirror.
//!
//! Every subcommand record derives both `clap::Args` and serde. All fields
//! are optional so a flag left unset never shadows a config-file value;
//! defaults are applied after merging.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use confide::{Error, FitConfig, FitMethod, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(
    name = "confide",
    version,
    about = "Combine classifier probabilities with labeler votes"
)]
pub struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its oracle posteriors.
    Simulate(SimulateArgs),
    /// Fit combiner parameters.
    Fit(FitArgs),
    /// Per-row combined posteriors as CSV.
    Combine(CombineArgs),
    /// Error, NLL, ECE and cwECE of the combination and of each input alone.
    Evaluate(EvaluateArgs),
    /// Eval error as a function of training size.
    LearningCurve(LearningCurveArgs),
    /// Conditional-independence diagnostics of a dataset.
    Diagnose(DiagnoseArgs),
    /// Accuracy lower bounds and the calibration error bound.
    Theory(TheoryArgs),
}

fn parse_method(s: &str) -> Result<FitMethod> {
    s.parse()
}

/// Hyperparameters; names match [`FitConfig`] one-to-one.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FitOptions {
    #[arg(long)]
    pub prior_accuracy: Option<f64>,
    #[arg(long)]
    pub prior_strength: Option<f64>,
    #[arg(long)]
    pub temp_mu: Option<f64>,
    #[arg(long)]
    pub temp_sigma: Option<f64>,
    #[arg(long)]
    pub search_tol: Option<f64>,
    #[arg(long)]
    pub em_max_iters: Option<usize>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    #[arg(long)]
    pub em_init_temperature: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub lr_max_iters: Option<usize>,
    #[arg(long)]
    pub lr_tol: Option<f64>,
    #[arg(long)]
    pub posterior_nodes: Option<usize>,
}

impl FitOptions {
    pub fn to_config(&self) -> Result<FitConfig> {
        let mut set = Map::new();
        for (key, value) in as_object(serde_json::to_value(self)?) {
            if !value.is_null() {
                set.insert(key, value);
            }
        }
        Ok(serde_json::from_value(Value::Object(set))?)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Diagonal of a symmetric labeler confusion matrix.
    #[arg(long)]
    pub phi_diag: Option<f64>,
    /// Full confusion matrix, rows indexed by vote. Config file only.
    #[arg(skip)]
    pub phi_star: Option<Vec<Vec<f64>>>,
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
    #[arg(long)]
    pub t_star: Option<f64>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Probability that the vote copies the model's argmax.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Data file; `.jsonl` selects JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to `<out stem>.oracle.csv` next to the data file.
    #[arg(long)]
    pub oracle_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<FitMethod>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CombineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Oracle posteriors, enabling the true calibration error of the model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// With `--oracle`, also the true calibration error of the combination.
    #[arg(long)]
    pub phi_true: Option<PathBuf>,
    /// Reliability table of the combination as CSV.
    #[arg(long)]
    pub reliability_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct LearningCurveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<FitMethod>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Single file split into train and eval instead of `--train`/`--eval`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Replicates per size.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TheoryArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// True confusion matrix: a bare JSON matrix, or a simulate config or
    /// report holding `phi_star`.
    #[arg(long)]
    pub phi_true: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn as_object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => Map::new(),
    }
}

/// Overlays the flags on the config file. Keys in the file that no flag
/// mirrors are rejected; `config` itself may not appear in the file.
pub fn merge<T>(flags: T, config: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Some(path) = config else { return Ok(flags) };
    let text = fs::read_to_string(path)?;
    let Value::Object(mut base) = serde_json::from_str(&text)? else {
        return Err(Error::ConfigInvalid(format!(
            "{} must hold a JSON object",
            path.display()
        )));
    };
    let known: BTreeSet<String> = as_object(serde_json::to_value(T::default())?)
        .keys()
        .cloned()
        .collect();
    if let Some(key) = base.keys().find(|k| !known.contains(*k) || *k == "config") {
        return Err(Error::ConfigInvalid(format!(
            "unknown key `{key}` in {}",
            path.display()
        )));
    }
    for (key, value) in as_object(serde_json::to_value(&flags)?) {
        if !value.is_null() {
            base.insert(key, value);
        }
    }
    Ok(serde_json::from_value(Value::Object(base))?)
}

pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid(format!("missing --{flag}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file() {
        let f = config_file(r#"{"method": "pl-map", "prior_strength": 3.0, "l2": 0.5}"#);
        let flags = FitArgs {
            fit: FitOptions {
                prior_strength: Some(7.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let merged = merge(flags, Some(f.path())).unwrap();
        assert_eq!(merged.method, Some(FitMethod::PlMap));
        assert_eq!(merged.fit.prior_strength, Some(7.0));
        let cfg = merged.fit.to_config().unwrap();
        assert_eq!(cfg.l2, 0.5);
        assert_eq!(cfg.temp_mu, FitConfig::default().temp_mu);
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = config_file(r#"{"method": "pl-map", "prior_strenght": 3.0}"#);
        let err = merge(FitArgs::default(), Some(f.path())).unwrap_err();
        assert_eq!(err.kind(), "ConfigInvalid");
        let f = config_file(r#"{"config": "other.json"}"#);
        assert!(merge(DiagnoseArgs::default(), Some(f.path())).is_err());
    }

    #[test]
    fn simulate_file_accepts_full_matrix() {
        let f = config_file(r#"{"k": 2, "phi_star": [[0.9, 0.2], [0.1, 0.8]], "seed": 4}"#);
        let merged = merge(SimulateArgs::default(), Some(f.path())).unwrap();
        assert_eq!(merged.phi_star.unwrap()[1], vec![0.1, 0.8]);
        assert_eq!(merged.seed, Some(4));
    }
}
