//! `helix`: assemble, run, transform, verify, serve and simulate.
//!
//! Exit status: 0 success, 1 operational error, 2 usage error, 3 the
//! compared programs (or the simulation and the live registry) diverge.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use helix_core::isa::DEFAULT_STEP_LIMIT;

use crate::inputs::Usage;

#[derive(Parser)]
#[command(name = "helix", version, about = "Binary diversification toolchain")]
struct Cli {
    /// Print a single JSON object instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble `.dasm` source into an image.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print an image as `.dasm` source.
    Dasm { image: PathBuf },
    /// Execute an image.
    Run {
        image: PathBuf,
        /// Input words, comma separated.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        input: String,
        #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
        step_limit: u64,
    },
    /// Rewrite an image through a pipeline.
    Transform {
        image: PathBuf,
        /// Pipeline JSON: `{"master_seed": .., "stages": [{"plugin": .., "config": {..}}]}`.
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check that two images behave the same; exits 3 if they do not.
    Verify {
        a: PathBuf,
        b: PathBuf,
        /// An input file, or `random:N:SEED`.
        #[arg(long)]
        inputs: String,
        /// Words per random input.
        #[arg(long, default_value_t = 8)]
        input_len: usize,
        /// Inclusive word range for random inputs.
        #[arg(long, default_value = "-100..100", allow_hyphen_values = true)]
        input_range: String,
    },
    /// Run the registry service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
        /// Overrides `data_dir` from the config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Simulate a pool policy, optionally replaying the trace against a
    /// live registry.
    Sim {
        #[arg(long)]
        config: PathBuf,
        /// Write the event log here as CSV.
        #[arg(long)]
        events_csv: Option<PathBuf>,
        /// Registry URL to replay the trace against.
        #[arg(long, requires_all = ["image", "pipeline"])]
        replay: Option<String>,
        /// Image to put for the replay.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Pipeline to put for the replay.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long, default_value = "sim-replay")]
        image_name: String,
        /// Real seconds per simulated second during the replay.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

fn dispatch(command: Command, json: bool) -> anyhow::Result<commands::Report> {
    match command {
        Command::Asm { source, output } => commands::asm(&source, &output),
        Command::Dasm { image } => commands::dasm(&image),
        Command::Run { image, input, step_limit } => commands::run(&image, &input, step_limit),
        Command::Transform { image, pipeline, output } => commands::transform(&image, &pipeline, &output),
        Command::Verify { a, b, inputs, input_len, input_range } => {
            commands::verify(&a, &b, &inputs, input_len, &input_range)
        }
        Command::Serve { config, listen, data_dir } => commands::serve(config.as_deref(), listen, data_dir, json),
        Command::Sim { config, events_csv, replay, image, pipeline, image_name, time_scale } => {
            let replay = match (replay, image, pipeline) {
                (Some(url), Some(image), Some(pipeline)) => {
                    Some(commands::ReplayArgs { url, image, pipeline, image_name, time_scale })
                }
                _ => None,
            };
            commands::sim(&config, events_csv.as_deref(), replay)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.json;
    match dispatch(cli.command, json) {
        Ok(report) => {
            if json {
                if let Some(value) = &report.json {
                    println!("{value}");
                }
            } else {
                print!("{}", report.text);
            }
            ExitCode::from(report.status)
        }
        Err(e) => {
            let usage = e.chain().any(|c| c.is::<Usage>());
            if json {
                let code = if usage { "usage" } else { "error" };
                eprintln!("{}", json!({"error": format!("{e:#}"), "code": code}));
            } else {
                eprintln!("helix: {e:#}");
            }
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
