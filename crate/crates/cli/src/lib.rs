//! The `icdlaat` command line: corpus generation, label spaces, training,
//! evaluation, prediction and a small prediction service.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod serve;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "icdlaat", version, about = "ICD-10 multi-label coding of long clinical stays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted keywords.
    Gen(commands::GenArgs),
    /// Build a label space manifest from a corpus.
    Labels(commands::LabelsArgs),
    /// Train a model.
    Train(commands::TrainArgs),
    /// Score a model against a labelled corpus.
    Eval(commands::EvalArgs),
    /// Predict codes for stays or a single text.
    Predict(commands::PredictArgs),
    /// Serve predictions over HTTP.
    Serve(serve::ServeArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Labels(a) => commands::labels(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Serve(a) => serve::serve(a),
    }
}
