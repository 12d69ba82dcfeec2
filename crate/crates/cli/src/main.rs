//! `vnpose`: scripted entry points for synthesis, training, evaluation and
//! the property checks.
//!
//! Every command writes its outputs and a `manifest.json` into `--out-dir`.
//! Exit codes: 0 success, 1 property failure, 2 bad input, 3 internal error.
//! Errors go to stderr as one JSON line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod error;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "vnpose", version = run::BUILD_ID, about = "Equivariant keypoint pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the randomised equivariance and invariance suite over the layer kit.
    CheckEquivariance(commands::CheckEquivariance),
    /// Generate object models and labelled synthetic scenes.
    SynthGen(commands::SynthGen),
    /// Train a network on a scene directory.
    Train(commands::Train),
    /// Run the pose pipeline on scenes and score it.
    Eval(commands::Eval),
    /// Fit a rigid pose to a correspondence file.
    FitPose(commands::FitPose),
    /// Score detections against ground truth.
    Metrics(commands::Metrics),
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck(commands::Gradcheck),
    /// Back-project a depth image to a point cloud.
    Backproject(commands::Backproject),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CheckEquivariance(_) => "check-equivariance",
            Command::SynthGen(_) => "synth-gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::FitPose(_) => "fit-pose",
            Command::Metrics(_) => "metrics",
            Command::Gradcheck(_) => "gradcheck",
            Command::Backproject(_) => "backproject",
        }
    }

    fn execute(&self) -> Result<(), CliError> {
        match self {
            Command::CheckEquivariance(a) => commands::check_equivariance(a),
            Command::SynthGen(a) => commands::synth_gen(a),
            Command::Train(a) => commands::train(a),
            Command::Eval(a) => commands::eval(a),
            Command::FitPose(a) => commands::fit_pose(a),
            Command::Metrics(a) => commands::metrics(a),
            Command::Gradcheck(a) => commands::gradcheck(a),
            Command::Backproject(a) => commands::backproject(a),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            let err = CliError {
                kind: ErrorKind::BadInput,
                reason: first,
            };
            eprintln!("{}", err.to_line("vnpose"));
            return ExitCode::from(err.kind.exit_code());
        }
    };
    let name = cli.command.name();
    std::panic::set_hook(Box::new(move |info| {
        let err = CliError {
            kind: ErrorKind::Internal,
            reason: format!("panic: {info}"),
        };
        eprintln!("{}", err.to_line(name));
    }));
    match std::panic::catch_unwind(|| cli.command.execute()) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("{}", e.to_line(name));
            ExitCode::from(e.kind.exit_code())
        }
        Err(_) => ExitCode::from(ErrorKind::Internal.exit_code()),
    }
}
