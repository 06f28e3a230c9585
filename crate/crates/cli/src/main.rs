mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Category, CliError};

#[derive(Debug, Parser)]
#[command(name = "matte", version, about = "Layer/timestep routed conditioning and attribute token inversion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `toy`, `latent-diffusion`, or a backend config JSON file.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Seed for inversion, sampling and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (for `eval`, the report CSV path).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run config with optional `backend`, `inversion`, `sampler` and `eval` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn attribute tokens from a reference image.
    Invert(commands::InvertArgs),
    /// Sample an image with learned tokens.
    Generate(commands::GenerateArgs),
    /// Record cross-attention maps of tracked words under a routed grid.
    Probe(commands::ProbeArgs),
    /// Evaluation protocols.
    #[command(subcommand)]
    Eval(commands::EvalCommand),
    /// Dominant colors of an image.
    Palette(commands::PaletteArgs),
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return Err(CliError::new(Category::Usage, first.trim_start_matches("error: ")));
        }
    };
    commands::dispatch(cli, &argv)
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    if let Err(e) = run(argv) {
        eprintln!("{e}");
        std::process::exit(e.category.exit_code());
    }
}
