//! `codemae` command-line front end.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::manifest::RunManifest;

/// Joint optical/SAR masked-autoencoder pretraining and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "codemae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic paired dataset as PNGs plus a manifest.
    GenData(GenDataArgs),
    /// Pretrain an encoder and write metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Representation diagnostics: spectrum, SSIM curve, alignment, PCA.
    Diagnose(DiagnoseArgs),
    /// Linear probe of frozen pooled features.
    Probe(ProbeArgs),
    /// Finite-difference check of every gradient rule.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a run manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub scenes: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub unpaired_fraction: f64,
    /// Upper bound on regions per scene.
    #[arg(long, default_value_t = 6)]
    pub regions: usize,
    /// Probability that the SAR acquisition sees a changed region.
    #[arg(long, default_value_t = 0.0)]
    pub asynchrony: f64,
    /// Probability that a region takes the scene's dominant class.
    #[arg(long, default_value_t = 0.0)]
    pub class_coherence: f64,
    #[arg(long, default_value = "synth")]
    pub dataset: String,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Spectrum,
    Curve,
    Alignment,
    Pca,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Labels for the checkpoints, in order; defaults to the variant name.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Dataset directory containing `manifest.tsv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    /// Images feeding the spectrum and PCA.
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    /// Pyramid levels of the SSIM curve.
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Probe an untrained encoder built from `--config`/`--set`.
    #[arg(long)]
    pub random: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or a comma list of ops, layers, losses, model.
    #[arg(long, default_value = "all")]
    pub component: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Directory for the CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate one backward rule to prove the check catches it.
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

/// A failure with a chosen exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<codemae::Error>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else if e.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

/// Worker cap from `CODEMAE_THREADS`, else the available parallelism.
fn threads() -> Result<usize> {
    match std::env::var("CODEMAE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!(Exit {
                code: EXIT_USAGE,
                message: format!("CODEMAE_THREADS must be a positive integer, got {v:?}"),
            }),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let threads = threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, args, threads),
        Command::Pretrain(a) => commands::pretrain(&a, args, threads),
        Command::Diagnose(a) => commands::diagnose(&a, args, threads),
        Command::Probe(a) => commands::probe(&a, args, threads),
        Command::Gradcheck(a) => commands::gradcheck(&a, args, threads),
        Command::Replay { manifest } => {
            let text = std::fs::read_to_string(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let m = RunManifest::parse(&text)?;
            if m.command == "replay" {
                bail!("a replay manifest cannot be replayed");
            }
            let argv = ["codemae".to_string(), m.command.clone()].into_iter().chain(m.args.iter().cloned());
            let cli = Cli::try_parse_from(argv).map_err(|e| Exit {
                code: EXIT_USAGE,
                message: e.to_string(),
            })?;
            run(cli, m.args)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli, std::env::args().skip(2).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
