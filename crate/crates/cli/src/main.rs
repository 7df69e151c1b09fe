//! `fairpool` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for failures
//! while running.

mod payout;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fairpool::config::RunConfig;
use fairpool::objectives::{ObjectiveKind, ObjectiveSpec};
use fairpool::redistribution::PayoutMode;

#[derive(Parser)]
#[command(
    name = "fairpool",
    version,
    about = "Fairness-aware ride-pooling simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (flat `key = value` file). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Risk grid, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    r: Option<Vec<f64>>,
    #[arg(long)]
    mode: Option<PayoutMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the city and write locations, edges and neighborhoods.
    GenCity(Common),
    /// Run one simulation and write its artifacts.
    Simulate(Common),
    /// Run every (objective, λ) combination on the same demand.
    Sweep(Common),
    /// Train a tabular value model.
    Train(Common),
    /// Shapley values from a coalition table or a run directory.
    Shapley {
        #[command(flatten)]
        common: Common,
        /// `coalition_bitmask,value` CSV or a simulate output directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Incomes to pair with a coalition table (defaults to the values).
        #[arg(long, value_delimiter = ',', num_args = 1)]
        pi: Option<Vec<f64>>,
    },
    /// Payouts over a risk grid.
    Redistribute {
        #[command(flatten)]
        common: Common,
        /// Shapley CSV, coalition table CSV, or a directory holding `shapley.csv`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1)]
        pi: Option<Vec<f64>>,
    },
    /// Recompute the metrics report from a simulate output directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

/// Problems with the configuration or command line; mapped to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.objective.is_some() || c.lambda.is_some() {
        let kind = c.objective.unwrap_or(cfg.objective.kind);
        let lambda = c.lambda.unwrap_or(if kind.uses_lambda() {
            cfg.objective.lambda
        } else {
            0.0
        });
        cfg.objective = ObjectiveSpec::new(kind, lambda).map_err(config_error)?;
    }
    if let Some(r) = &c.r {
        if r.is_empty() || r.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(config_error("--r: every value must lie in [0, 1]"));
        }
        cfg.r_grid = r.clone();
    }
    if let Some(m) = c.mode {
        cfg.payout_mode = m;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCity(c) => run::gen_city(&load_config(&c)?, &c.out),
        Command::Simulate(c) => run::simulate(&load_config(&c)?, &c.out).map(|_| ()),
        Command::Sweep(c) => run::sweep(&load_config(&c)?, &c.out),
        Command::Train(c) => run::train(&load_config(&c)?, &c.out),
        Command::Shapley { common, input, pi } => payout::shapley(&common, input.as_deref(), pi),
        Command::Redistribute { common, input, pi } => payout::redistribute(&common, &input, pi),
        Command::Report { common, input } => payout::report(&common, &input),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(
                    e.downcast_ref::<fairpool::Error>(),
                    Some(fairpool::Error::Config { .. })
                );
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
