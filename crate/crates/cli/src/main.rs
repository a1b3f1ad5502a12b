use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tracefix::pipeline::{Pipeline, PipelineConfig, Stage};
use tracefix::teacher::CacheMode;

/// Distil teacher reasoning into a small repair policy, then refine it
/// with a learned reward.
#[derive(Debug, Parser)]
#[command(name = "tracefix", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "tracefix.toml")]
    config: PathBuf,

    /// How teacher calls use the response cache.
    #[arg(long, global = true, value_enum, default_value_t = Mode::Record)]
    mode: Mode,

    /// Global seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// With `run`, stop after this stage.
    #[arg(long, global = true)]
    stage: Option<Stage>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Record,
    Replay,
    Live,
}

impl From<Mode> for CacheMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Record => CacheMode::Record,
            Mode::Replay => CacheMode::Replay,
            Mode::Live => CacheMode::Live,
        }
    }
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Ask the teacher for a reasoned fix per training task.
    Collect,
    /// Keep verified traces and cap the dataset size.
    Filter,
    /// Fine-tune the base policy on the filtered traces.
    Sft,
    /// Sample candidate repairs from the fine-tuned policy.
    GenCandidates,
    /// Have the teacher judge the candidates.
    Judge,
    /// Train the reward model on the judgments.
    TrainRm,
    /// Optimise the policy against the reward model.
    Ppo,
    /// Score base, fine-tuned and optimised policies.
    Eval,
    /// Every stage in order, through `--stage` if given.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Collect => Stage::Collect,
            Command::Filter => Stage::Filter,
            Command::Sft => Stage::Sft,
            Command::GenCandidates => Stage::GenCandidates,
            Command::Judge => Stage::Judge,
            Command::TrainRm => Stage::TrainRm,
            Command::Ppo => Stage::Ppo,
            Command::Eval => Stage::Eval,
            Command::Run => return None,
        })
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let mut pipeline = Pipeline::new(config, cli.mode.into())?;
    log::debug!("writing to {}", pipeline.output_dir().display());
    let outcomes = match cli.command.stage() {
        Some(stage) => vec![pipeline.run_stage(stage)?],
        None => pipeline.run_through(cli.stage.unwrap_or(Stage::Eval))?,
    };
    for o in outcomes {
        let state = if o.skipped { "up to date" } else { "done" };
        println!("{}: {state} {}", o.stage, o.summary);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Stage errors already name the stage and carry their cause.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
