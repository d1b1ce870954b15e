//! `candi`: pretrain a backbone, stream test data through an adapting
//! detector, evaluate saved reports and run the ablation grid.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use candi_core::pipeline::Mode;
use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(
    name = "candi",
    version,
    about = "Curated test-time adaptation for time-series anomaly detection"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file; every key has a default.
    #[arg(long, global = true, env = "CANDI_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "CANDI_MODE", value_parser = parse_mode)]
    mode: Option<Mode>,
    /// False-positive rate level that sets the operating threshold.
    #[arg(long, global = true, env = "CANDI_ALPHA")]
    alpha: Option<f64>,
    /// Adaptation step size.
    #[arg(long, global = true, env = "CANDI_LR")]
    lr: Option<f64>,
    /// Optimizer steps per adaptation event.
    #[arg(long, global = true, env = "CANDI_STEPS")]
    steps: Option<usize>,
    #[arg(long, global = true, env = "CANDI_GATING_INIT")]
    gating_init: Option<f64>,
    /// Hidden width of the adaptation modules.
    #[arg(long, global = true, env = "CANDI_HIDDEN_DIM")]
    hidden_dim: Option<usize>,
    /// Seeds data generation, pretraining and the stream alike.
    #[arg(long, global = true, env = "CANDI_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "CANDI_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded shift scenario as train/test CSV files.
    Synth,
    /// Pretrain the backbone and write the checkpoint artifacts.
    Pretrain,
    /// Stream the test data through one mode and write its report.
    Run,
    /// Recompute metrics from saved reports and check their summaries.
    Eval {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Run the four selection × update-target cells.
    Ablate,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            alpha: self.alpha,
            lr: self.lr,
            steps: self.steps,
            gating_init: self.gating_init,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result =
        commands::load_config(cli.global.config.as_deref(), &cli.global.overrides()).and_then(|cfg| {
            match &cli.command {
                Command::Synth => commands::synth(&cfg),
                Command::Pretrain => commands::pretrain(&cfg),
                Command::Run => commands::run(&cfg),
                Command::Eval { reports } => commands::eval(reports),
                Command::Ablate => commands::ablate(&cfg),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
