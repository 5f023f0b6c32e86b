mod commands;
mod config;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::DictSource;
use config::{require, RunConfig};

/// Raised for bad user input: missing files, malformed configs, mismatched
/// dimensions.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "cocal", version, about = "Dictionary-based object parsing on synthetic scenes")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a JSON-lines metrics log.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint path; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Select the raw nearest-component predictions.
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Segment an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Write cosine-similarity matrices of the dictionaries as CSV.
    ExportDict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DictSource::Dictionary)]
        source: DictSource,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("COCAL_THREADS") {
        let threads: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Invalid(format!("COCAL_THREADS must be a positive integer, got `{value}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let mut config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, seed, count } => {
            if let Some(seed) = seed {
                config.scene.seed = seed;
            }
            if let Some(count) = count {
                config.count = count;
            }
            let out = commands::resolve_out(out, &config)?;
            commands::gen_data(&config, out)
        }
        Command::Train {
            dataset,
            out,
            checkpoint,
            seed,
            steps,
        } => {
            if let Some(seed) = seed {
                config.experiment.train.seed = seed;
            }
            if let Some(steps) = steps {
                let train = &mut config.experiment.train;
                train.steps = steps;
                train.warmup_steps = train.warmup_steps.min(steps);
            }
            let dataset = require(dataset, &config.paths.dataset, "dataset (--dataset)")?;
            let out = commands::resolve_out(out, &config)?;
            let checkpoint = checkpoint.or(config.paths.checkpoint.clone());
            commands::train(&config, dataset, out, checkpoint)
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            no_postprocess,
        } => {
            let checkpoint = require(checkpoint, &config.paths.checkpoint, "checkpoint (--checkpoint)")?;
            let dataset = require(dataset, &config.paths.dataset, "dataset (--dataset)")?;
            commands::eval(checkpoint, dataset, out.or(config.paths.out.clone()), !no_postprocess)
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            no_postprocess,
        } => {
            let checkpoint = require(checkpoint, &config.paths.checkpoint, "checkpoint (--checkpoint)")?;
            let out = commands::resolve_out(out, &config)?;
            commands::infer(checkpoint, input, out, !no_postprocess)
        }
        Command::ExportDict { checkpoint, out, source } => {
            let checkpoint = require(checkpoint, &config.paths.checkpoint, "checkpoint (--checkpoint)")?;
            let out = commands::resolve_out(out, &config)?;
            commands::export_dict(checkpoint, out, source)
        }
    }
}

/// 1 for invalid input, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cocal::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
