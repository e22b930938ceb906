//! Command-line front end for the fourier-activated adapter workbench.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, GradcheckArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "faa", version, about = "Train and inspect fourier-activated adapters")]
struct Cli {
    /// Run configuration file (TOML); defaults apply for missing sections
    #[arg(long, global = true, default_value = "faa.toml")]
    config: PathBuf,

    /// Override the seed from the config file
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides output_dir from the config file
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite files already present in the output directory
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the config and print the resolved run recipe
    Check,
    /// Train the adapters and head on the synthetic band task
    Train,
    /// Compare analytic gradients against central finite differences
    Gradcheck {
        /// Batch size used for the check
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Maximum allowed relative error per parameter group
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Finite-difference step size
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Training steps to run before checking, so the fusion scales
        /// leave their zero init and every group carries task gradient
        #[arg(long, default_value_t = 3)]
        warm_steps: usize,
        /// Perturb one group's analytic gradients (negative control)
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train ablation variants and tabulate the results
    Ablate {
        /// Variant names such as original or num_grids=3; empty runs the
        /// default study
        variants: Vec<String>,
        /// Comma-separated list of training seeds
        #[arg(long, default_value = "0")]
        seeds: String,
    },
    /// Evaluate a checkpoint and export its frequency report
    Analyze {
        /// Checkpoint written by the train command
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = if cli.config.exists() || cli.config.as_os_str() != "faa.toml" {
        RunConfig::load(&cli.config).map_err(CliError::Usage)?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"));

    match &cli.command {
        Command::Check => commands::cmd_check(&cfg),
        Command::Train => commands::cmd_train(&cfg, &out, cli.force),
        Command::Gradcheck { samples, tol, step, warm_steps, corrupt } => commands::cmd_gradcheck(
            &cfg,
            &GradcheckArgs {
                samples: *samples,
                tol: *tol,
                step: *step,
                warm_steps: *warm_steps,
                corrupt: corrupt.clone(),
            },
        ),
        Command::Ablate { variants, seeds } => {
            commands::cmd_ablate(&cfg, &out, cli.force, variants, seeds)
        }
        Command::Analyze { checkpoint } => {
            commands::cmd_analyze(&cfg, checkpoint, &out, cli.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code() as u8)
        }
    }
}
