//! Command line frontend: runs the pose model over tensor files, converts
//! between keypoints and Gaussian heatmaps, scores predictions, reports
//! layer costs and executes the built-in verification suites.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "omnipose", version, about = "Multi-branch pose estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model over image tensors, writing heatmaps and decoded keypoints
    Infer(commands::InferArgs),
    /// Render ground-truth keypoints into Gaussian heatmap tensors
    Encode(commands::EncodeArgs),
    /// Decode heatmap tensors into a prediction keypoint file
    Decode(commands::DecodeArgs),
    /// Score a prediction file against ground truth
    Eval(commands::EvalArgs),
    /// Report parameter and FLOP costs for a model config
    Count(commands::CountArgs),
    /// Run the built-in oracle, gradient and round-trip checks
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(args) => commands::infer(args),
        Command::Encode(args) => commands::encode(args),
        Command::Decode(args) => commands::decode(args),
        Command::Eval(args) => commands::eval(args),
        Command::Count(args) => commands::count(args),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
