//! Command-line driver: `run`, `eval`, `synth` and `gradcheck`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tti_core::gradcheck::GradcheckOptions;
use tti_core::optimizer::Mode;

pub const EXIT_OK: u8 = 0;
/// Bad usage, bad configuration or unreadable input.
pub const EXIT_USAGE: u8 = 1;
/// Some episodes failed or were flagged; the rest were written.
pub const EXIT_PARTIAL: u8 = 2;
/// A numerical check failed.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "tti", version, about = "Few-shot video segmentation by test-time transductive inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run inference over the episodes of a config and score them.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score predicted masks against ground truth, aggregating over runs.
    Eval {
        /// Prediction directory of one run; repeat for several runs.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "miou,vc,bf", value_parser = parse_metrics)]
        metrics: Metrics,
        #[arg(long, default_value = "3,5,7,9,11", value_parser = parse_windows)]
        windows: Windows,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic episodes and an index for `run`.
    Synth {
        /// TOML file with generator settings; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_sign_error: bool,
    },
}

#[derive(Debug, Clone)]
pub struct Metrics(pub Vec<String>);

#[derive(Debug, Clone)]
pub struct Windows(pub Vec<usize>);

fn parse_metrics(s: &str) -> Result<Metrics, String> {
    config::parse_metrics(s).map(Metrics).map_err(|e| e.to_string())
}

fn parse_windows(s: &str) -> Result<Windows, String> {
    config::parse_windows(s).map(Windows).map_err(|e| format!("{e:#}"))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Run {
            config,
            out,
            mode,
            seed,
            workers,
        } => {
            let overrides = commands::run::RunOverrides {
                output: out,
                mode,
                seed,
                workers,
            };
            commands::run::run(&config, &overrides).map(|(_, code)| code)
        }
        Command::Eval {
            pred,
            gt,
            metrics,
            windows,
            out,
        } => commands::eval::run(&commands::eval::EvalArgs {
            pred,
            gt,
            metrics: metrics.0,
            windows: windows.0,
            out,
        }),
        Command::Synth { spec, count, seed, out } => {
            commands::synth::run(spec.as_deref(), count, seed, &out).map(|_| EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            instances,
            inject_sign_error,
        } => commands::gradcheck::run(&GradcheckOptions {
            seed,
            instances,
            inject_sign_error,
            ..Default::default()
        }),
    }
}
