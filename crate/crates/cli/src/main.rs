//! `semg`: experiment harness for the Time2Vec CNN-Transformer.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerics
//! error.

mod commands;
mod config;
mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use semg_t2v::Error;

use crate::config::{default_config_text, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(name = "semg", version, about = "Time2Vec CNN-Transformer for two-channel sEMG gestures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageSel {
    #[value(name = "1-only")]
    OneOnly,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Synthetic spec as JSON or TOML; the built-in default if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        subjects: Option<u32>,
    },
    /// Convert a tree of per-trial CSV files into the binary trial format.
    Ingest {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = semg_t2v::dataset::SAMPLE_RATE_HZ)]
        rate: u32,
    },
    /// Check a config and print it with every default filled in.
    Validate {
        config: Option<PathBuf>,
        /// Print a complete config for the given preset instead.
        #[arg(long, value_enum, conflicts_with = "config")]
        print_default: Option<PresetArg>,
    },
    /// Two-stage training and test evaluation for the selected folds.
    Train {
        config: PathBuf,
        #[arg(long)]
        all_folds: bool,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageSel,
    },
    /// Concat-fusion sweep over the Time2Vec width at fixed model width.
    AblateDt2v {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,16,32,64,96")]
        dims: Vec<usize>,
        #[arg(long)]
        all_folds: bool,
    },
    /// Train the three positional variants on every fold and compare them.
    AblateVariants {
        config: PathBuf,
        #[arg(long)]
        all_folds: bool,
    },
    /// Calibrate trained models on each held-out subject.
    Adapt {
        config: PathBuf,
        /// Run directory holding the stage-2 checkpoints; the config's run
        /// directory if omitted.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        adapt_epochs: Option<usize>,
        #[arg(long)]
        all_folds: bool,
    },
    /// Single-window inference latency of a checkpoint.
    Profile {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot-ready CSV tables for a run directory.
    Export { run_dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
}

fn load(path: &Path, all_folds: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.all_folds |= all_folds;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed, subjects } => commands::synth(spec.as_deref(), &out, seed, subjects),
        Command::Ingest { src, out, rate } => commands::ingest(&src, &out, rate),
        Command::Validate { config, print_default } => match (config, print_default) {
            (_, Some(p)) => {
                let preset = match p {
                    PresetArg::Full => Preset::Full,
                    PresetArg::Desk => Preset::Desk,
                };
                print!("{}", default_config_text(preset)?);
                Ok(())
            }
            (Some(c), None) => commands::validate(&load(&c, false)?),
            (None, None) => Err(Error::Config("validate needs a config file or --print-default".into()).into()),
        },
        Command::Train { config, all_folds, stage } => {
            commands::train(&load(&config, all_folds)?, matches!(stage, StageSel::OneOnly))
        }
        Command::AblateDt2v { config, dims, all_folds } => commands::ablate_dt2v(&load(&config, all_folds)?, &dims),
        Command::AblateVariants { config, all_folds } => commands::ablate_variants(&load(&config, all_folds)?),
        Command::Adapt { config, pretrained, adapt_epochs, all_folds } => {
            commands::adapt(&load(&config, all_folds)?, pretrained.as_deref(), adapt_epochs)
        }
        Command::Profile { checkpoint, runs, out } => commands::profile(&checkpoint, runs, out.as_deref()),
        Command::Export { run_dir } => {
            for f in export::export(&run_dir)? {
                println!("wrote {}", run_dir.join(f).display());
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::OutputDir(_) => 1,
                Error::Numerics(_) | Error::Degenerate(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
