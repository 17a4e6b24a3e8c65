mod config;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gdc_core::Error as CoreError;

use config::{ConfigError, ExperimentConfig};
use pipeline::Run;

/// Distributional control on enumerable sequence spaces.
#[derive(Debug, Parser)]
#[command(name = "gdc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the energy-based target and write ebm_report.json.
    Fit(RunArgs),
    /// Fit, then train a policy (gdc or a baseline) with periodic metrics.
    Train(RunArgs),
    /// Compare adaptivity variants across seeds.
    Ablation(RunArgs),
    /// Exact enumeration report: Z, moments, KL(p, a), Pythagorean residual.
    Oracle(RunArgs),
    /// Metrics for a saved policy.
    Eval(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides the config's `output`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replace the config's top-level seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Root for relative or default run directories.
    #[arg(long, env = "GDC_OUTPUT_ROOT", default_value = "runs", hide = true)]
    output_root: PathBuf,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_GUARD: u8 = 4;

fn output_dir(args: &RunArgs, config: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &args.output {
        return out.clone();
    }
    match &config.output {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => args.output_root.join(p),
        None => {
            let stem = args.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            args.output_root.join(stem)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::UniverseTooLarge { .. } => EXIT_GUARD,
                CoreError::UnattainableTarget { .. }
                | CoreError::NoAcceptedSamples { .. }
                | CoreError::DegenerateWeights(_)
                | CoreError::NonpositiveZ(_)
                | CoreError::EmptySupport
                | CoreError::SupportViolation(_) => EXIT_NUMERICAL,
                CoreError::EmptyCorpus
                | CoreError::InvalidVocabulary(_)
                | CoreError::UnknownToken(_)
                | CoreError::InvalidOrder { .. }
                | CoreError::SchemaMismatch(_)
                | CoreError::InvalidConstraint { .. }
                | CoreError::DuplicateFeatureId(_)
                | CoreError::NoPointwiseConstraints
                | CoreError::MixedConstraints
                | CoreError::NothingToFit
                | CoreError::InvalidConfig(_)
                | CoreError::Json(_) => EXIT_CONFIG,
                _ => 1,
            };
        }
    }
    1
}

fn execute(command: &Command) -> anyhow::Result<()> {
    let (args, run_fn): (&RunArgs, fn(&mut Run) -> anyhow::Result<()>) = match command {
        Command::Fit(a) => (a, pipeline::run_fit),
        Command::Train(a) => (a, pipeline::run_train),
        Command::Ablation(a) => (a, pipeline::run_ablation),
        Command::Oracle(a) => (a, pipeline::run_oracle),
        Command::Eval(a) => (a, pipeline::run_eval),
    };
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        config.seed = seed;
    }
    let output = output_dir(args, &config);
    let mut run = Run::open(config, Path::new(&args.config), output)?;
    run_fn(&mut run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
