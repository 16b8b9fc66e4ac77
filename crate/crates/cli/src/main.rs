//! `perfusion` — synthetic cohorts, model fitting, signatures, training and
//! leave-one-patient-out evaluation from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "perfusion", version, about = "Perfusion quantification and tissue classification")]
pub struct Cli {
    /// Run configuration (TOML); defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for synthetic data and fit multi-starts (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort: series files, manifest and ground truth.
    Synth {
        /// Use deliberately overlapping class profiles.
        #[arg(long)]
        overlapping: bool,
        /// Shuffle pathology labels across patients (null control).
        #[arg(long)]
        shuffle_labels: bool,
    },
    /// Fit every region of a manifest; writes fits.csv and fits.json.
    Fit { manifest: PathBuf },
    /// Quality-filter fits and extract signatures; writes signatures.csv and signatures.json.
    Features { fits: PathBuf },
    /// Train a classifier on all patients of a signatures file; writes model.json.
    Train { signatures: PathBuf },
    /// Full pipeline with leave-one-patient-out evaluation; writes report.json, report.txt, predictions.csv.
    Evaluate { manifest: PathBuf },
    /// Fit one region file; writes curve.csv and prints the signature and verdict.
    Inspect { roi_file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::EXIT_ERROR)
        }
    }
}
