use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowdet::config::PipelineConfig;

mod logging;
mod stages;

use stages::Ctx;

/// Malicious encrypted-flow detection from noisily labeled training data.
#[derive(Parser)]
#[command(name = "flowdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline configuration; absent keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append structured log records (JSON lines) here instead of stderr.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "info")]
    log_level: log::Level,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus with injected label noise.
    Synth {
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Group a packet file into flows by directional five-tuple.
    Ingest {
        packets: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Encode flows into feature vectors with the sequence autoencoder.
    Extract {
        flows: PathBuf,
        out: PathBuf,
        /// Autoencoder checkpoint, read unless `--fit` is given.
        #[arg(long)]
        model: PathBuf,
        /// Train the autoencoder on these flows and write `--model`.
        #[arg(long)]
        fit: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Relabel a noisily labeled feature store.
    Correct {
        features: PathBuf,
        out: PathBuf,
        /// Per-sample correction report.
        #[arg(long)]
        report: PathBuf,
        /// True labels (`id,label`) for the noise summary.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train GAN instances on corrected features and write synthetic samples.
    Augment {
        features: PathBuf,
        out: PathBuf,
        /// Directory for GAN checkpoints and region thresholds.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the co-teaching detector on one or more feature stores.
    Train {
        #[arg(required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Correction report whose remaining-noise estimate sets the forget
        /// rate when the config leaves it unset.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a feature store with a trained detector.
    Predict {
        model: PathBuf,
        features: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Precision, recall and F1 of predictions against a labeled feature store.
    Evaluate {
        predictions: PathBuf,
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured experiment grid and write the result table.
    Experiment {
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the density model on normal-labeled rows and score every row.
    DensityReport {
        features: PathBuf,
        out: PathBuf,
        /// Also save the fitted density model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the full default configuration.
    Defaults,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Extract { .. } => "extract",
            Command::Correct { .. } => "correct",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Experiment { .. } => "experiment",
            Command::DensityReport { .. } => "density-report",
            Command::Defaults => "defaults",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Synth { common, .. }
            | Command::Ingest { common, .. }
            | Command::Extract { common, .. }
            | Command::Correct { common, .. }
            | Command::Augment { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Experiment { common, .. }
            | Command::DensityReport { common, .. } => Some(common),
            Command::Defaults => None,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(common) = cli.command.common().cloned() else {
        print!("{}", PipelineConfig::default().to_toml());
        return Ok(());
    };
    let sink: Box<dyn Write + Send> = match &common.log {
        Some(p) => Box::new(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?,
        ),
        None => Box::new(std::io::stderr()),
    };
    logging::init(cli.command.name(), common.log_level, sink);
    let config = match &common.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    log::info!("config sha256 {} seed {}", config.hash(), common.seed);
    let ctx = Ctx { config, seed: common.seed };

    match &cli.command {
        Command::Synth { out_dir, .. } => stages::synth(&ctx, out_dir),
        Command::Ingest { packets, out, .. } => stages::ingest(&ctx, packets, out),
        Command::Extract { flows, out, model, fit, .. } => stages::extract(&ctx, flows, out, model, *fit),
        Command::Correct { features, out, report, truth, .. } => {
            stages::correct(&ctx, features, out, report, truth.as_deref())
        }
        Command::Augment { features, out, checkpoints, .. } => {
            stages::augment(&ctx, features, out, checkpoints.as_deref())
        }
        Command::Train { features, model, report, .. } => stages::train(&ctx, features, model, report.as_deref()),
        Command::Predict { model, features, out, .. } => stages::predict(&ctx, model, features, out),
        Command::Evaluate { predictions, truth, out, .. } => stages::evaluate(&ctx, predictions, truth, out.as_deref()),
        Command::Experiment { out, .. } => stages::experiment(&ctx, out),
        Command::DensityReport { features, out, model, .. } => {
            stages::density_report(&ctx, features, out, model.as_deref())
        }
        Command::Defaults => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            log::logger().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            log::logger().flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
