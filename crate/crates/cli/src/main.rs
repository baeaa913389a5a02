//! `spda`: synthesize datasets, verify gradients, train and evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure (including failed gradient checks).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spda_core::{AttentionVariant, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "spda",
    version,
    about = "Second-order geometric attention for volumetric segmentation"
)]
pub struct Cli {
    /// TOML configuration file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip-connection attention variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    attention: Option<AttentionVariant>,
    /// Disable choices the method description leaves unstated.
    #[arg(long, global = true)]
    strict_paper: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        n_cases: Option<usize>,
        #[arg(long)]
        prevalence: Option<f64>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Number of consecutive seeds to run, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Negate analytic gradients (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source of probability maps; the fixtures bypass the model.
        #[arg(long, value_enum, default_value_t = Predictor::Model, hide = true)]
        predictor: Predictor,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    Model,
    GroundTruth,
    Zero,
}

fn parse_variant(s: &str) -> Result<AttentionVariant, String> {
    s.parse::<AttentionVariant>().map_err(|e| e.to_string())
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<spda_core::Error>() {
            Some(spda_core::Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<spda_core::Error> for Failure {
    fn from(e: spda_core::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

/// Defaults, then the config file, then flags.
fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = cli.attention {
        cfg.attention.variant = v;
    }
    if cli.strict_paper {
        cfg.strict_paper = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth {
            n_cases,
            prevalence,
        } => {
            if let Some(n) = n_cases {
                cfg.synth.n_cases = *n;
            }
            if let Some(p) = prevalence {
                cfg.synth.prevalence = *p;
            }
            commands::synth(&cfg.resolved(), out_dir(&cli)?, cli.force)
        }
        Command::Gradcheck {
            seeds,
            inject_fault,
        } => commands::gradcheck(&cfg.resolved(), cli.out.as_deref(), *seeds, *inject_fault),
        Command::Train {
            dataset,
            epochs,
            lr,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = lr {
                cfg.optim.lr = *lr;
            }
            commands::train(&cfg.resolved(), dataset, out_dir(&cli)?, cli.force)
        }
        Command::Eval {
            dataset,
            checkpoint,
            predictor,
        } => {
            let explicit_variant = cli.attention;
            commands::eval(
                &cfg.resolved(),
                dataset,
                checkpoint.as_deref(),
                *predictor,
                explicit_variant,
                out_dir(&cli)?,
                cli.force,
            )
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&std::path::Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out <dir> is required for this command".into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
