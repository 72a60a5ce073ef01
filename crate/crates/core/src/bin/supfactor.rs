//! Command-line entry point for the experiment harness.
//!
//! Exit codes: 0 success, 2 config error (including argument parsing),
//! 3 missing input, 4 numerical failure, 1 anything else.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use supfactor::error::{Error, Result};
use supfactor::harness::{self, ExperimentConfig, MuSetting};
use supfactor::io::FileStatus;

#[derive(Parser)]
#[command(
    name = "supfactor",
    version,
    about = "Supervised factor-model experiments: local vs encoded supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep μ for under-specified linear fits and record held-out curves.
    SweepMu(RunArgs),
    /// Sweep μ at matched dimension and record factor dragging.
    SensitivityMu(RunArgs),
    /// Image tasks: ground truth vs sequential, local, and encoded NMF.
    NmfTable1(RunArgs),
    /// Toy spectral factor recovery with an encoded classifier head.
    CsfaToy(RunArgs),
    /// Filter raw windows and emit banded power/coherence features.
    ExtractFeatures(RunArgs),
    /// Re-hash a finalized run directory against its manifest.
    Verify {
        /// Directory produced by one of the run subcommands.
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (JSON). Omitted keys take their documented
    /// defaults; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment's data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the supervision strength: a number, or "auto" to balance
    /// the loss magnitudes (nmf-table1 and csfa-toy only).
    #[arg(long, value_parser = parse_mu)]
    mu: Option<MuSetting>,
}

fn parse_mu(s: &str) -> std::result::Result<MuSetting, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SweepMu(args) => execute("sweep_mu_linear", "sweep-mu", args),
        Command::SensitivityMu(args) => execute("sensitivity_mu", "sensitivity-mu", args),
        Command::NmfTable1(args) => execute("nmf_table1", "nmf-table1", args),
        Command::CsfaToy(args) => execute("csfa_toy", "csfa-toy", args),
        Command::ExtractFeatures(args) => execute("extract_features", "extract-features", args),
        Command::Verify { run_dir } => {
            let outcome = harness::verify_run(&run_dir)?;
            for (name, status) in &outcome.report.entries {
                let tag = match status {
                    FileStatus::Ok => "ok",
                    FileStatus::Missing => "MISSING",
                    FileStatus::Mismatch => "MISMATCH",
                    FileStatus::Unlisted => "UNLISTED",
                };
                println!("{tag:>8}  {name}");
            }
            if outcome.failed_marker {
                println!("run recorded a failure (FAILED marker present)");
            }
            if outcome.is_ok() {
                println!("verified: {} files intact", outcome.report.entries.len());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn execute(tag: &str, subcommand: &str, args: RunArgs) -> Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|err| {
                if err.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingInput(format!("config file {} not found", path.display()))
                } else {
                    Error::Io(err)
                }
            })?;
            let config = harness::parse_config(&text)?;
            if config.tag() != tag {
                return Err(Error::InvalidConfig(format!(
                    "config declares experiment {:?} but {subcommand} was invoked; \
                     run `supfactor {}` with this config instead",
                    config.tag(),
                    config.subcommand()
                )));
            }
            config
        }
        None => ExperimentConfig::default_for_tag(tag)?,
    };
    if let Some(seed) = args.seed {
        config.set_seed(seed)?;
    }
    if let Some(dir) = &args.out {
        config.set_output_dir(dir);
    }
    if let Some(mu) = args.mu {
        config.set_mu(mu)?;
    }
    let dir = config.run()?;
    println!("run finalized: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}
