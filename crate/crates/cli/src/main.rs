//! Command-line pipeline for slate recommendation RL research:
//! generate -> validate -> split -> transform -> fit simulator -> evaluate
//! simulator -> understand -> train policies -> evaluate online -> CPE,
//! plus a vectorized environment server.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slate_rl_cli::config::RunConfig;
use slate_rl_cli::tasks::{self, TaskContext};

#[derive(Parser)]
#[command(
    name = "slate-rl",
    about = "Offline RL toolkit for slate recommendation: logged-data pipeline, simulators, policy learning, and counterfactual evaluation",
    version
)]
struct Cli {
    /// TOML run configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic logs from the configured world preset.
    Gen,
    /// Parse and validate a raw log file.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Split a log into train/test by the configured mode.
    Split {
        #[arg(long)]
        input: PathBuf,
    },
    /// Turn a log into MDP samples and CPE trajectories.
    Transform {
        #[arg(long)]
        input: PathBuf,
        /// User-model checkpoint for hidden-layer observations.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit the user simulator on a log.
    FitSim {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a fitted simulator on held-out sessions.
    EvalSim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the data-understanding diagnostics on a log.
    Understand {
        #[arg(long)]
        input: PathBuf,
    },
    /// Behavior-clone a policy from MDP samples.
    TrainBc {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Batch-constrained Q-learning from MDP samples.
    TrainBcq {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Online REINFORCE against the learned simulator (or the world when
    /// no checkpoint is given).
    TrainPg {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint online.
    EvalOnline {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Counterfactual policy evaluation from logged trajectories.
    Cpe {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Serve vectorized environments over newline-delimited JSON.
    ServeEnv {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let ctx = TaskContext::new(config, cli.out)?;
    match cli.command {
        Command::Gen => tasks::gen(&ctx),
        Command::Validate { input } => tasks::validate(&ctx, &input),
        Command::Split { input } => tasks::split(&ctx, &input),
        Command::Transform { input, model } => tasks::transform(&ctx, &input, model.as_deref()),
        Command::FitSim { input } => tasks::fit_sim(&ctx, &input),
        Command::EvalSim { model, input } => tasks::eval_sim(&ctx, &model, &input),
        Command::Understand { input } => tasks::understand(&ctx, &input),
        Command::TrainBc { samples } => tasks::train_bc(&ctx, &samples),
        Command::TrainBcq { samples } => tasks::train_bcq(&ctx, &samples),
        Command::TrainPg { model } => tasks::train_pg(&ctx, model.as_deref()),
        Command::EvalOnline { policy, model } => {
            tasks::eval_online(&ctx, &policy, model.as_deref())
        }
        Command::Cpe { trajectories, policy, model } => {
            tasks::cpe_task(&ctx, &trajectories, &policy, model.as_deref())
        }
        Command::ServeEnv { bind, model } => tasks::serve_env(&ctx, &bind, model.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            // machine-readable error record on stderr
            let record = serde_json::json!({
                "error": error.to_string(),
                "chain": error.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
