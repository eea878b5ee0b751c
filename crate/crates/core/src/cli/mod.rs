//! Command-line entry point. Every command reads one TOML config, writes its
//! artifacts into `output_dir` and finishes with `<command>.manifest.json`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "spanflow", version, about = "Span-level text generation trained as a flow network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    /// The checkpoint written by `train`.
    Trained,
    /// The exactly balanced policy computed from the reward.
    Consistent,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment every document into spans (segments.jsonl).
    Segment(Common),
    /// Build the retrieval index (index.json).
    Index(Common),
    /// Fit the trigram model and train the preference model.
    TrainReward(Common),
    /// Train the policy.
    Train(Common),
    /// Sample continuations for document prefixes.
    Sample(Common),
    /// Compare the exact terminal distribution with the normalised reward.
    EvalExact {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = PolicyChoice::Trained)]
        policy: PolicyChoice,
    },
    /// Marginal likelihood of every document continuation.
    EvalLikelihood(Common),
    /// Diversity of the sampled continuations.
    EvalDiversity(Common),
    /// Multiple-choice scoring over a JSON-lines options file.
    Qa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        options: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Segment(c)
            | Command::Index(c)
            | Command::TrainReward(c)
            | Command::Train(c)
            | Command::Sample(c)
            | Command::EvalLikelihood(c)
            | Command::EvalDiversity(c) => c,
            Command::EvalExact { common, .. } | Command::Qa { common, .. } => common,
        }
    }
}

/// Exit code for an error raised while running a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let common = cli.command.common();
    let mut cfg = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let result = match &cli.command {
        Command::Segment(_) => commands::segment(cfg),
        Command::Index(_) => commands::index(cfg),
        Command::TrainReward(_) => commands::train_reward(cfg),
        Command::Train(_) => commands::train(cfg),
        Command::Sample(_) => commands::sample(cfg),
        Command::EvalExact { policy, .. } => commands::eval_exact(cfg, *policy),
        Command::EvalLikelihood(_) => commands::eval_likelihood(cfg),
        Command::EvalDiversity(_) => commands::eval_diversity(cfg),
        Command::Qa { options, .. } => commands::qa(cfg, options.clone()),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
