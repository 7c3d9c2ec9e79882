//! Command-line orchestration of the feedback-conditional policy pipeline.
//!
//! Every stage reads upstream artifacts from and writes its own under
//! `output_dir/<stage>/`, together with a `manifest.json` holding the config
//! digest and a SHA-256 per artifact.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fcp_core::FcpError;
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing upstream artifact {}; run the stage that produces it first", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] FcpError),
}

impl CliError {
    /// 2 for configuration problems, 1 for contract or verification failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) => 2,
            CliError::Core(FcpError::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fcp", version, about = "Feedback-conditional policy experiments")]
pub struct Cli {
    /// TOML experiment config; defaults apply to every missing key.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `online.T=10`; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print the stage summary as JSON on stdout (verify, report).
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Draw training and evaluation instructions.
    GenTasks,
    /// Sample reference responses and annotate them with feedback.
    Collect,
    /// Conditional maximum likelihood on the collected triples.
    TrainOffline,
    /// Build the positive-feedback condition pool.
    BuildPool,
    /// Online bootstrapping from the offline checkpoint.
    Bootstrap {
        /// Continue from the latest round checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train a baseline (sft, rft, cft, grpo_lite).
    TrainBaseline {
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate checkpoints under the configured conditions.
    Eval,
    /// Check the posterior oracle identities on random tabular instances.
    Verify,
    /// Training-dynamics CSV and a combined summary.
    Report,
}

/// Parses arguments, runs the stage and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ctx = stages::Context::new(cfg)?;
    match &cli.command {
        Command::GenTasks => stages::gen_tasks(&ctx),
        Command::Collect => stages::collect(&ctx),
        Command::TrainOffline => stages::train_offline(&ctx),
        Command::BuildPool => stages::build_pool(&ctx),
        Command::Bootstrap { resume } => stages::bootstrap(&ctx, *resume),
        Command::TrainBaseline { method } => {
            let m = match method {
                Some(s) => config::BaselineMethod::parse(s)
                    .ok_or_else(|| CliError::Config(format!("unknown baseline method `{s}`")))?,
                None => ctx.cfg.baseline.method,
            };
            stages::train_baseline(&ctx, m)
        }
        Command::Eval => stages::eval(&ctx),
        Command::Verify => {
            let report = stages::verify(&ctx)?;
            if cli.json {
                print_json(&report);
            }
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Core(FcpError::Verification(report.failure.clone().unwrap_or_default())))
            }
        }
        Command::Report => {
            let summary = stages::report(&ctx)?;
            if cli.json {
                print_json(&summary);
            }
            Ok(())
        }
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn print_json<T: serde::Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}
