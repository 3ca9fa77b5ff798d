//! `nowcast`: reproducible runs from scene synthesis to verification.
//!
//! Every subcommand writes `run_manifest.json` into its output directory;
//! passing that file back as `--config` replays the run. Errors print one
//! `error: ...` line on stderr; usage problems exit with 2, failures with 1.

mod analysis;
mod config;
mod dataset;
mod model;

use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use crate::config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "nowcast", version, about = "ConvLSTM precipitation nowcasting runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a storm scene into field containers.
    Synth(dataset::SynthArgs),
    /// Index field containers into a block and patch manifest.
    Build(dataset::BuildArgs),
    /// Train a network on a dataset manifest.
    Train(model::TrainArgs),
    /// Forecast every lead for dataset anchors with tiled inference.
    Predict(model::PredictArgs),
    /// Score forecasts and the persistence baseline against observations.
    Evaluate(analysis::EvaluateArgs),
    /// Rank block features by relevance and redundancy.
    Mrmr(analysis::MrmrArgs),
    /// Lag autocorrelation with an exponential decay fit.
    Autocorr(analysis::AutocorrArgs),
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => dataset::synth(a),
        Command::Build(a) => dataset::build(a),
        Command::Train(a) => model::train_run(a),
        Command::Predict(a) => model::predict(a),
        Command::Evaluate(a) => analysis::evaluate(a),
        Command::Mrmr(a) => analysis::mrmr(a),
        Command::Autocorr(a) => analysis::autocorr(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("{}", Cli::command().render_usage());
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
