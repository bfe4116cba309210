//! `skelterp` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skelterp::harness::{exit_code, Experiment, ExperimentConfig, Overrides, EXIT_OK};
use skelterp::Result;

#[derive(Parser, Debug)]
#[command(name = "skelterp", version, about = "Recover 3D skeletons from 2D keypoint heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training-set size; also caps the test and shifted sets.
    #[arg(long, global = true)]
    count: Option<usize>,

    /// Comma-separated salt-and-pepper levels for the sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    noise_levels: Option<Vec<f64>>,

    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate training, test and shifted corpora.
    Gen,
    /// Supervised training on synthetic heatmaps.
    Train,
    /// Fine-tune on 2D-only data through the reprojection loss.
    Finetune,
    /// Train the heatmap refiner.
    TrainRefiner,
    /// Evaluate the interpreter and the baseline on the test corpus.
    Eval,
    /// Run the fitting baseline on the test corpus.
    Baseline,
    /// Compare both pipelines across noise levels and plot the result.
    Sweep,
    /// Nearest-neighbour retrieval over predicted structure or viewpoint.
    Retrieve,
    /// Re-plot an existing sweep.
    Plot,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::TrainRefiner => "train-refiner",
            Command::Eval => "eval",
            Command::Baseline => "baseline",
            Command::Sweep => "sweep",
            Command::Retrieve => "retrieve",
            Command::Plot => "plot",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.single_thread {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        count: cli.count,
        noise_levels: cli.noise_levels.clone(),
    }
    .apply(&mut config);
    let exp = Experiment::new(config, cli.command.name())?;
    match cli.command {
        Command::Gen => exp.gen(),
        Command::Train => exp.train().map(|_| ()),
        Command::Finetune => exp.finetune(),
        Command::TrainRefiner => exp.train_refiner(),
        Command::Eval => exp.eval(),
        Command::Baseline => exp.baseline(),
        Command::Sweep => exp.sweep().map(|_| ()),
        Command::Retrieve => exp.retrieve(),
        Command::Plot => exp.plot(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("skelterp {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
