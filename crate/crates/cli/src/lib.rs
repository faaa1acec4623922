//! Command line, artifact formats and checkpoints for the CMMP zero-shot HOI
//! pipeline built on `cmmp-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod parallel;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

/// Environment variable naming the run directory when `--run-dir` is absent.
pub const RUN_ROOT_ENV: &str = "CMMP_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "cmmp", version = manifest::VERSION, about = "Zero-shot HOI detection with conditional multi-modal prompts")]
pub struct Cli {
    /// Run directory holding every artifact [default: current directory].
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    pub run_dir: Option<PathBuf>,
    /// Flat `key = value` config file; overrides built-in defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth(commands::SynthArgs),
    /// Contrastively pretrain the dual encoder.
    Pretrain(commands::PretrainArgs),
    /// Build the zero-shot seen/unseen split.
    Split(commands::SplitArgs),
    /// Fit global spatial patterns on seen training interactions.
    GspFit(commands::GspFitArgs),
    /// Train prompts and head on seen interactions.
    Train(commands::TrainArgs),
    /// Score human-object pairs of an image split.
    Predict(commands::PredictArgs),
    /// Compute seen/unseen/full mAP and HM.
    Eval(commands::EvalArgs),
    /// Draw precision-recall curves and mAP bars as SVG.
    Plot(commands::PlotArgs),
    /// Print the effective configuration with key documentation.
    Config,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let ctx = commands::Ctx { run_dir: cli.run_dir.unwrap_or_else(|| PathBuf::from(".")), cfg };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Pretrain(a) => commands::pretrain(&ctx, &a),
        Command::Split(a) => commands::split(&ctx, &a),
        Command::GspFit(a) => commands::gsp_fit(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Predict(a) => commands::predict(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a).map(|r| print!("{}", r.table())),
        Command::Plot(a) => commands::plot(&ctx, &a),
        Command::Config => {
            print!("{}", ctx.cfg.documented());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs them, returning the
/// process exit code. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cmmp: {e}");
            e.exit_code()
        }
    }
}
