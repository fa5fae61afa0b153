//! `lossforge` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 run aborted
//! (retry cap or I/O failure mid-run).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lossforge::{Metric, TaskKind, Variant};

use config::Overrides;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn aborted(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: format!("run aborted: {}", msg.into()) }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lossforge", version, about = "Search loss functions built from primitive operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Falls back to the config, then LOSSFORGE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// seg, box or det.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the evolutionary search and write its artifacts.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value = "lossforge-run")]
        out: PathBuf,
        /// Also write the generated proxy dataset as CSV.
        #[arg(long)]
        dump_dataset: bool,
    },
    /// Score formulas with the rejection test and report pass/fail.
    RejectCheck {
        #[command(flatten)]
        common: Common,
        /// Formula file; the shipped discovered corpus when omitted.
        file: Option<PathBuf>,
    },
    /// Compare search variants under equal wall-clock time.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated list, e.g. `naive,+rejection`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        variants: Option<Vec<String>>,
        #[arg(long)]
        wall_clock_secs: Option<f64>,
        #[arg(long, default_value = "lossforge-ablation")]
        out: PathBuf,
    },
}

fn resolve(common: &Common, budget: Option<usize>) -> Result<config::Resolved, CliError> {
    let file = common.config.as_deref().map(config::load).transpose()?;
    let o = Overrides {
        seed: common.seed,
        budget,
        task: common.task,
        metric: common.metric,
        workers: common.workers,
    };
    config::resolve(file, &o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search { common, budget, out, dump_dataset } => {
            commands::search(&resolve(&common, budget)?, &out, dump_dataset)
        }
        Command::RejectCheck { common, file } => {
            let r = resolve(&common, None)?;
            commands::reject_check(&r, file.as_deref(), common.task.is_some(), common.metric.is_some())
        }
        Command::Ablation { common, budget, variants, wall_clock_secs, out } => {
            let mut r = resolve(&common, budget)?;
            let mut section = r.ablation.take().unwrap_or_default();
            if let Some(names) = variants {
                section.variants = names
                    .iter()
                    .filter(|n| !n.trim().is_empty())
                    .map(|n| n.parse::<Variant>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::usage(e.to_string()))?;
            }
            if let Some(secs) = wall_clock_secs {
                section.wall_clock_secs = secs;
            }
            r.ablation = Some(section);
            commands::ablation(&r, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
