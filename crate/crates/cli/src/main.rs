use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diligence_core::config::PipelineConfig;
use diligence_core::data::Month;
use diligence_core::pipeline::{self, CommandOutput};
use diligence_core::{Error, Result};

/// Scores community health workers on the diligence of their data collection.
#[derive(Debug, Parser)]
#[command(name = "diligence", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set cluster.k=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit KDEs, the cluster model and the predictor on the training window.
    Train,
    /// Score one month with the frozen models.
    Score {
        #[arg(long, value_name = "YYYY-MM")]
        month: Month,
    },
    /// Evaluate next-month predictions over the test window.
    PredictEval,
    /// Compare threshold and anomaly baselines over the test window.
    Baseline,
    /// Generate a synthetic cohort with its ground truth.
    Synth {
        /// Cohort spec file (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Summarise the saved models without refitting.
    Report,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    PipelineConfig::load(path, &cli.overrides)
}

fn run(cli: &Cli) -> Result<CommandOutput> {
    match &cli.command {
        Command::Train => pipeline::cmd_train(&config(cli)?),
        Command::Score { month } => pipeline::cmd_score(&config(cli)?, *month),
        Command::PredictEval => pipeline::cmd_predict_eval(&config(cli)?),
        Command::Baseline => pipeline::cmd_baseline(&config(cli)?),
        Command::Synth { spec, out } => pipeline::cmd_synth(spec, out),
        Command::Report => pipeline::cmd_report(&config(cli)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.text);
            for f in &out.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
