mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::Precision;
use crate::error::{CliError, CliResult, ErrorRecord};

/// Concept mining, pseudo-labeling, toy training and 3D fusion over
/// SfM-grounded photo collections.
#[derive(Debug, Parser)]
#[command(name = "babel-miner", version)]
struct Cli {
    /// TOML pipeline config; every field has a default.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides paths.output).
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Override a config field, e.g. --set mining.min_rho=0.1
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse reconstructions and report track-index statistics.
    Ingest,
    /// Distill the concept set.
    Mine,
    /// Pseudo-label images and split them.
    Label,
    /// Enumerate training pairs and sample batches.
    Pairs,
    /// Train the toy featurizer.
    TrainToy,
    /// Score reconstruction points and export point clouds.
    Fuse,
    /// Classification, segmentation, 3D and retrieval report.
    Metrics,
    /// Transfer captions between overlapping views.
    Augment,
    /// Generate a synthetic fixture.
    Synth {
        /// Skip the PNG views.
        #[arg(long)]
        no_images: bool,
    },
    /// Gradient checks, closed forms and brute-force oracles.
    Selftest {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 50)]
        instances: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Mine => "mine",
            Command::Label => "label",
            Command::Pairs => "pairs",
            Command::TrainToy => "train-toy",
            Command::Fuse => "fuse",
            Command::Metrics => "metrics",
            Command::Augment => "augment",
            Command::Synth { .. } => "synth",
            Command::Selftest { .. } => "selftest",
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BABEL_MINER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("BABEL_MINER_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let cfg = config::load(
        cli.config.as_deref(),
        &cli.set,
        cli.seed,
        cli.output.as_deref(),
    )?;
    let precision = cfg.precision;
    let ctx = Ctx::new(cfg);
    log::info!("{} -> {}", cli.command.name(), ctx.paths.output.display());
    match (cli.command, precision) {
        (Command::Ingest, _) => commands::ingest(&ctx),
        (Command::Mine, _) => commands::mine(&ctx),
        (Command::Label, _) => commands::label(&ctx),
        (Command::Pairs, _) => commands::pairs(&ctx),
        (Command::TrainToy, Precision::F32) => commands::train_toy::<f32>(&ctx),
        (Command::TrainToy, Precision::F64) => commands::train_toy::<f64>(&ctx),
        (Command::Fuse, Precision::F32) => commands::fuse::<f32>(&ctx),
        (Command::Fuse, Precision::F64) => commands::fuse::<f64>(&ctx),
        (Command::Metrics, Precision::F32) => commands::metrics::<f32>(&ctx),
        (Command::Metrics, Precision::F64) => commands::metrics::<f64>(&ctx),
        (Command::Augment, _) => commands::augment(&ctx),
        (Command::Synth { no_images }, _) => commands::synth(&ctx, !no_images),
        (Command::Selftest { seeds, instances }, _) => commands::selftest(&ctx, seeds, instances),
    }
}

fn fail(err: &CliError, command: Option<&str>) -> ExitCode {
    let record = ErrorRecord {
        status: "error",
        kind: err.kind(),
        command,
        message: err.to_string(),
    };
    let line = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"status\":\"error\",\"message\":{:?}}}", err.to_string()));
    eprintln!("{line}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let msg = msg.lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            return fail(&CliError::Usage(msg), None);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, Some(name)),
    }
}
