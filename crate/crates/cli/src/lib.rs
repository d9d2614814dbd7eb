//! Command-line driver: dataset generation, training, evaluation, parameter
//! counting and single-sample codec runs, all configured through one
//! resolved TOML file.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{CodecModel, TrainOptions};
use config::{parse_gamma, Baseline, ExperimentConfig, Profile, TrainMode};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ancinet", version, about = "Noisy CSI feedback experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Globals {
    /// TOML file laid over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, validation and test sets.
    GenData,
    /// Train the networks.
    Train {
        #[arg(long, value_enum)]
        stage: Option<TrainMode>,
        /// Continue from the last saved epoch.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Denoiser checkpoint to reuse with `--stage feedback`.
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Evaluate trained models over the CNR sweep.
    Eval {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Comma-separated CNRs in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        cnrs: Option<Vec<f64>>,
        /// Comma-separated compression ratios, e.g. 1/4,1/64.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<String>>,
        /// Write per-sample NMSE files.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Print the parameter breakdown.
    CountParams {
        #[arg(long)]
        gamma: Option<String>,
    },
    /// Run one sample through a trained model and dump the grids.
    Codec {
        /// Dataset file holding the sample.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "two-stage")]
        model: CodecModel,
        #[arg(long)]
        gamma: Option<String>,
    },
}

/// Profile, then config file, then flags.
pub fn resolve(global: &Globals, command: &Command) -> CliResult<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path, global.profile)?,
        None => ExperimentConfig::profile(global.profile.unwrap_or(Profile::Desk)),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.out = o.clone();
    }
    match command {
        Command::Train { stage, gamma, epochs, .. } => {
            if let Some(s) = stage {
                cfg.train.mode = *s;
            }
            if let Some(g) = gamma {
                cfg.model.gamma = g.clone();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        Command::Eval {
            baseline,
            cnrs,
            gammas,
            dump_samples,
        } => {
            if let Some(b) = baseline {
                cfg.eval.baseline = *b;
            }
            if let Some(c) = cnrs {
                cfg.eval.cnrs = c.clone();
            }
            if let Some(g) = gammas {
                cfg.eval.gammas = g.clone();
            }
            cfg.eval.dump_samples |= dump_samples;
        }
        Command::Codec { gamma: Some(g), .. } => cfg.model.gamma = g.clone(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(&cli.global, &cli.command)?;
    let force = cli.global.force;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, force),
        Command::Train { resume, denoiser, .. } => commands::train(
            &cfg,
            &TrainOptions {
                resume: *resume,
                force,
                denoiser: denoiser.clone(),
            },
        ),
        Command::Eval { .. } => commands::eval(&cfg).map(|_| ()),
        Command::CountParams { gamma } => {
            let g = gamma.as_deref().map(parse_gamma).transpose()?;
            print!("{}", commands::count_params_cmd(&cfg, g)?);
            Ok(())
        }
        Command::Codec { input, index, model, .. } => commands::codec(&cfg, input, *index, *model, force).map(|_| ()),
    }
}
