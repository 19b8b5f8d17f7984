//! Command-line interface of the mfauc ranking engine.
//!
//! Subcommands: generate, train, evaluate, roc, tune, bound. Every run that
//! writes files also writes a `<output>.manifest` with the resolved
//! parameters and input/output digests; serial-mode reruns of the recorded
//! argv reproduce the outputs byte for byte.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad parameters,
//! invalid input data), 2 runtime error (I/O, divergence).

mod commands;
mod gridfile;
mod manifest;

use clap::{Parser, Subcommand};

use commands::{
    cmd_bound, cmd_evaluate, cmd_generate, cmd_roc, cmd_train, cmd_tune, exit_code_for,
    BoundArgs, EvaluateArgs, GenerateArgs, RocArgs, TrainArgs, TuneArgs,
};

#[derive(Parser)]
#[command(
    name = "mfauc",
    version,
    about = "Matrix factorisation ranking engine optimising smooth AUC surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark matrix (optionally with a holdout split)
    Generate(GenerateArgs),
    /// Train user/item factors with averaged or block-parallel SGD
    Train(TrainArgs),
    /// Compute ranking metrics for a trained model
    Evaluate(EvaluateArgs),
    /// Write an averaged ROC curve for a trained model
    Roc(RocArgs),
    /// Grid-search model selection with fold cross-validation
    Tune(TuneArgs),
    /// Generalisation-bound diagnostics of a rating matrix
    Bound(BoundArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Roc(args) => cmd_roc(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Bound(args) => cmd_bound(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
