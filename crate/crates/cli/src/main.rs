//! `twintower`: build a vocabulary, train two-tower models, score tower
//! preference and report the analyses.
//!
//! Exit codes: 0 success, 1 data or runtime error, 2 usage error.

mod commands;
mod report;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use settings::{Flags, Settings, UsageError};

#[derive(Parser)]
#[command(name = "twintower", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Count a corpus and write the vocabulary TSV
    BuildVocab,
    /// Phase 1: train both towers jointly and write a checkpoint
    Train,
    /// Phase 2: retrain one head per tower on the frozen trunk, then order the towers
    TrainHeads,
    /// Write per-token preference scores on the held-out documents
    Score,
    /// Pairwise top-K correlations between preference files, as JSON
    Correlate,
    /// Preference-score histograms per POS tag, as JSON
    PosReport,
    /// PCA + ICA word components and clusters of a checkpoint's embeddings
    Ica,
    /// Every analysis merged into report.json and report.txt
    Report,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let s = Settings::resolve(&cli.flags)?;
    match cli.command {
        Command::BuildVocab => commands::build_vocab(&s),
        Command::Train => commands::train(&s),
        Command::TrainHeads => commands::train_heads_cmd(&s),
        Command::Score => commands::score(&s),
        Command::Correlate => commands::correlate(&s),
        Command::PosReport => commands::pos_report_cmd(&s),
        Command::Ica => commands::ica(&s),
        Command::Report => commands::report(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
