//! Command-line surface. Every subcommand's flags are optional so a JSON
//! `--config` file can supply them; flags given on the command line win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "routelab-out";

#[derive(Debug, Parser)]
#[command(name = "routelab", version, about = "Sparse MoE routing laboratory", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Route one score matrix and write its mask and gates.
    Route(RouteArgs),
    /// Run seeded property suites.
    Verify(VerifyArgs),
    /// Finite-difference gradient and Jacobian checks on micro layers.
    Gradcheck(GradcheckArgs),
    /// Train one routing mode on the synthetic task.
    Train(TrainArgs),
    /// Train several modes from identical initialization.
    Compare(CompareArgs),
    /// Re-emit CSV curves and charts from a saved report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RouteArgs {
    /// Score matrix as CSV, one token per row.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// tc, ec or usmoe.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `3` (pairs), `2x` (per token), `1.5x` (fractional) or `cap4` (per expert).
    #[arg(long)]
    pub budget: Option<String>,
    /// batch or sequence.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// `scores` routes on the matrix as given; `logits` maps it first.
    #[arg(long)]
    pub basis: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// proposition, dominance, topk-invariance, forward-equivalence, gradcheck or all.
    #[arg(long)]
    pub suite: Option<String>,
    /// Instances per suite; each suite has its own default.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Task, model and optimizer flags shared by `train` and `compare`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<String>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sequences per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_batches: Option<usize>,
    /// Seeds the data stream, and the task and model unless given separately.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Fraction of every sequence replaced by noise tokens.
    #[arg(long)]
    pub corrupt: Option<f64>,
    #[arg(long)]
    pub center_std: Option<f64>,
    #[arg(long)]
    pub token_std: Option<f64>,
    #[arg(long)]
    pub noise_token_std: Option<f64>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// tanh or identity.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Option<String>,
    /// Start from a saved checkpoint instead of a seeded init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Comma-separated modes, default `tc,ec,usmoe`.
    #[arg(long)]
    pub modes: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// A run or compare report written by `train` or `compare`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Layers command-line values over the JSON object in `config`.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(cli: &T, config: Option<&Path>) -> anyhow::Result<T> {
    let cli_value = serde_json::to_value(cli)?;
    let Some(path) = config else {
        return Ok(serde_json::from_value(cli_value)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Some(file) = file.as_object() else {
        bail!("config {} must hold a JSON object", path.display());
    };
    let known = serde_json::to_value(T::default())?;
    let known = known.as_object().expect("argument structs serialize to objects");
    let mut merged = file.clone();
    for key in merged.keys() {
        if !known.contains_key(key) {
            bail!("unknown key '{key}' in config {}", path.display());
        }
    }
    for (k, v) in cli_value.as_object().expect("object") {
        if !v.is_null() {
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(serde_json::Value::Object(merged))
        .with_context(|| format!("invalid value in config {}", path.display()))
}

pub fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
