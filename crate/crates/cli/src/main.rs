//! `overpaint`: the pair-extraction, training, generation and evaluation pipeline.

mod evaluation;
mod failure;
mod pairs;
mod run_manifest;
mod tokens;
mod training;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::CliResult;

/// Worker threads for per-file scoring; defaults to the available cores.
const THREADS_ENV: &str = "OVERPAINT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "overpaint", version, about = "Jazz overpainting pipeline: pairs, tokens, models and metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align performances to lead sheets and cut Original/Variation pairs.
    ExtractPairs(pairs::ExtractArgs),
    /// Copy edited statuses from a review file back into a manifest.
    ApplyReview(pairs::ApplyReviewArgs),
    /// Split by song and add the twelve transpositions of every pair.
    Augment(pairs::AugmentArgs),
    /// Encode accepted pairs as training sequences.
    Tokenize(tokens::TokenizeArgs),
    /// Train a model preset on a token corpus.
    Train(training::TrainArgs),
    /// Overpaint one Original, or every pair of a manifest split.
    Generate(training::GenerateArgs),
    /// Score a directory of MIDI files.
    Evaluate(evaluation::EvaluateArgs),
    /// Feature table of Originals and Variations per manifest.
    Report(evaluation::ReportArgs),
}

fn threads() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).unwrap_or_else(|| {
            log::warn!("ignoring {THREADS_ENV}={v}");
            overpaint_core::metrics::default_threads()
        }),
        Err(_) => overpaint_core::metrics::default_threads(),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ExtractPairs(a) => pairs::extract(&a).map(drop),
        Command::ApplyReview(a) => pairs::apply_review(&a).map(drop),
        Command::Augment(a) => pairs::augment(&a).map(drop),
        Command::Tokenize(a) => tokens::run(&a).map(drop),
        Command::Train(a) => training::run_train(&a).map(drop),
        Command::Generate(a) => training::run_generate(&a).map(drop),
        Command::Evaluate(a) => evaluation::run_evaluate(&a, threads()).map(drop),
        Command::Report(a) => evaluation::run_report(&a, threads()).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            log::error!("{failure}");
            ExitCode::from(failure.code())
        }
    }
}
