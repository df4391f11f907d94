//! Experiment CLI: reads a TOML configuration, runs one experiment, and
//! writes reproducible CSV artifacts.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{ExperimentConfig, ExperimentKind};

#[derive(Debug, Parser)]
#[command(
    name = "flowguide",
    about = "Guided multimodal flow sampling experiments on exact toy models",
    version
)]
struct Args {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Override the configured experiment.
    #[arg(long)]
    experiment: Option<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => return usage_error(&format!("cannot read {}: {e}", args.config.display())),
    };
    let mut config = match ExperimentConfig::parse(&text) {
        Ok(config) => config,
        Err(e) => return usage_error(&format!("{e:#}")),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.display().to_string();
    }
    if let Some(name) = &args.experiment {
        match ExperimentKind::parse(name) {
            Ok(kind) => config.experiment = kind,
            Err(e) => return usage_error(&format!("{e:#}")),
        }
    }

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => return usage_error(&format!("cannot build thread pool: {e}")),
    };

    let out_dir = PathBuf::from(&config.output_dir);
    let outcome = pool.install(|| experiments::run(&config, &out_dir, args.threads));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<flowguide_core::Error>()
                .map(error_kind)
                .unwrap_or("runtime");
            eprintln!("error kind={kind} message=\"{e:#}\"");
            ExitCode::FAILURE
        }
    }
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("error kind=usage message=\"{message}\"");
    ExitCode::from(2)
}

fn error_kind(e: &flowguide_core::Error) -> &'static str {
    use flowguide_core::Error::*;
    match e {
        InvalidState(_) => "invalid-state",
        InvalidArgument(_) => "invalid-argument",
        Singularity(_) => "singularity",
        DegeneratePosterior => "degenerate-posterior",
        CapacityExceeded { .. } => "capacity",
        SchemaMismatch(_) => "schema",
        PredictorEvaluation(_) => "predictor-evaluation",
        NonFiniteGradient { .. } => "non-finite-gradient",
        ResidualMask { .. } => "residual-mask",
    }
}
