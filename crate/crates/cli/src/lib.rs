//! Experiment runner for the `layerwise` binary: configuration, run
//! artifacts and the four subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{DatasetKind, ExperimentConfig, ModelSpec, RunArgs};

#[derive(Debug, Parser)]
#[command(name = "layerwise", version, about = "Train and compare backprop, DFA and layer-wise instant updates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write history, checkpoint, curve and summary.
    Train(RunArgs),
    /// Report accuracy, precision, recall and F1 of a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long = "report")]
        report: Option<PathBuf>,
    },
    /// Check backprop gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Train several rules (and seeds) and tabulate their test metrics.
    Compare(commands::CompareArgs),
}

/// Runs a parsed command; the result is the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train(args) => {
            commands::run_train(&args.resolve()?, out)?;
            Ok(0)
        }
        Command::Evaluate { run, checkpoint, report } => {
            let r = commands::run_evaluate(&run.resolve()?, &checkpoint)?;
            write!(out, "{}", r.to_table())?;
            if let Some(path) = report {
                artifacts::write_json(&path, &r)?;
            }
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let g = commands::run_gradcheck(&args)?;
            write!(out, "{}", g.report.to_table())?;
            writeln!(out, "kink-excluded parameters: {}", g.excluded)?;
            let angles: Vec<String> = g
                .dfa_alignment_deg
                .iter()
                .enumerate()
                .filter_map(|(l, a)| a.map(|a| format!("layer {l}: {a:.2}°")))
                .collect();
            writeln!(out, "DFA vs backprop alignment: {}", angles.join(", "))?;
            Ok(if g.report.passed { 0 } else { 1 })
        }
        Command::Compare(args) => {
            commands::run_compare(&args, out)?;
            Ok(0)
        }
    }
}
