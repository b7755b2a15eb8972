//! Command-line entry point.
//!
//! Subcommands mirror the pipeline phases: `train-style`, `augment`,
//! `search`, `train`, `evaluate`, `sweep`, `visualize`, and `pipeline` run
//! them end to end. `fixture` generates a synthetic texture dataset for
//! smoke runs. Failures exit non-zero with a machine-readable JSON error
//! record on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use styleaug_core::corpus::Split;
use styleaug_core::error::Error;
use styleaug_core::runner::{Command as RunnerCommand, Overrides, Runner};

#[derive(Parser)]
#[command(name = "styleaug", version, about = "Style-transfer augmentation and spatial-attention classification toolkit")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Worker-pool size for data-parallel sections.
    #[arg(long, global = true, default_value_t = 8)]
    workers: usize,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Pretrain the style-transfer decoder.
    TrainStyle,
    /// Materialize the configured augmentation plan.
    Augment,
    /// Run the grid search followed by TPE refinement.
    Search,
    /// Stage-one training; add --finetune for stage-two unfreezing.
    Train {
        #[arg(long)]
        finetune: bool,
    },
    /// Evaluate a saved classifier checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sweep augmentation proportions (defaults to the full 10x10 grid).
    Sweep {
        /// Comma-separated p1 values, e.g. 0.1,0.3.
        #[arg(long)]
        p1_values: Option<String>,
        /// Comma-separated p2 values.
        #[arg(long)]
        p2_values: Option<String>,
    },
    /// Export attention heatmaps and the confidence ranking.
    Visualize {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Full pipeline: style, augment, search, train, evaluate, visualize.
    Pipeline,
    /// Generate a synthetic texture dataset.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct FixtureArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    root: PathBuf,
    /// Comma-separated per-class totals, e.g. 400,200,100,50.
    #[arg(long, default_value = "400,200,100,50")]
    class_sizes: String,
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long, default_value_t = 0)]
    fixture_seed: u64,
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} value '{v}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    if let CliCommand::Fixture(args) = &cli.command {
        let sizes: Vec<usize> = args
            .class_sizes
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad class size '{v}'")))
            })
            .collect::<Result<_, _>>()?;
        let spec = styleaug_core::synth::SynthSpec {
            class_sizes: sizes,
            image_size: args.image_size,
            seed: cli.seed.unwrap_or(args.fixture_seed),
            fractions: (0.7, 0.15, 0.15),
        };
        let manifest = styleaug_core::synth::generate(&args.root, &spec)?;
        println!(
            "wrote {} records across {} classes under {}",
            manifest.records.len(),
            manifest.classes.len(),
            args.root.display()
        );
        return Ok(());
    }

    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required for this subcommand".into()))?;
    let overrides =
        Overrides { seed: cli.seed, run_dir: cli.run_dir.clone(), workers: Some(cli.workers) };
    let command = match &cli.command {
        CliCommand::TrainStyle => RunnerCommand::TrainStyle,
        CliCommand::Augment => RunnerCommand::Augment,
        CliCommand::Search => RunnerCommand::Search,
        CliCommand::Train { finetune } => RunnerCommand::Train { finetune: *finetune },
        CliCommand::Evaluate { checkpoint, split } => {
            let split = Split::parse(split)
                .ok_or_else(|| Error::Config(format!("unknown split '{split}'")))?;
            RunnerCommand::Evaluate { checkpoint: checkpoint.clone(), split }
        }
        CliCommand::Sweep { p1_values, p2_values } => {
            let grid = match (p1_values, p2_values) {
                (Some(p1s), Some(p2s)) => {
                    let p1s = parse_floats(p1s, "p1")?;
                    let p2s = parse_floats(p2s, "p2")?;
                    let mut cells = Vec::new();
                    for &a in &p1s {
                        for &b in &p2s {
                            cells.push((a, b));
                        }
                    }
                    Some(cells)
                }
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "provide both --p1-values and --p2-values, or neither".into(),
                    ))
                }
            };
            RunnerCommand::Sweep { grid }
        }
        CliCommand::Visualize { count } => RunnerCommand::Visualize { count: *count },
        CliCommand::Pipeline => RunnerCommand::Pipeline,
        CliCommand::Fixture(_) => unreachable!(),
    };
    let mut runner = Runner::new(config, &overrides)?;
    runner.dispatch(&command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.to_string(),
                "kind": e.kind(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
