//! `maskedge` command-line interface.

mod annotate;
mod bench;
mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskedge::ops::KernelPath;

/// Exit status for bad invocations.
const EXIT_USAGE: u8 = 1;
/// Exit status for unreadable or invalid data and models.
const EXIT_DATA: u8 = 2;

#[derive(Parser)]
#[command(name = "maskedge", version, about = "Tiny face-mask detector runtime")]
struct Cli {
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect faces with and without masks in images
    Detect(commands::DetectArgs),
    /// Time inference on a fixed random input
    Bench(bench::BenchArgs),
    /// Convert a JSON manifest and raw blobs into a model file
    Convert(commands::ConvertArgs),
    /// Score detections against ground truth (AP per class and mAP)
    Eval(commands::EvalArgs),
    /// Print a model's layer table, head and sizes
    Inspect(commands::InspectArgs),
    /// Write the seeded random-weight reference model as a manifest or model file
    Reference(commands::ReferenceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Reference,
    Optimized,
}

impl From<KernelArg> for KernelPath {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Reference => KernelPath::Reference,
            KernelArg::Optimized => KernelPath::Optimized,
        }
    }
}

/// Options shared by commands that run a model.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model file (.mef)
    #[arg(long, short)]
    pub model: PathBuf,

    /// Network input size, `N` or `WxH`; defaults to the size stored in the model
    #[arg(long, value_parser = input::parse_size)]
    pub size: Option<(usize, usize)>,

    /// Kernel implementation
    #[arg(long, value_enum, default_value_t = KernelArg::Optimized)]
    pub kernel: KernelArg,
}

/// An error caused by the invocation rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASKEDGE_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Command::Detect(a) => commands::detect(a, json),
        Command::Bench(a) => bench::run(a, json),
        Command::Convert(a) => commands::convert(a, json),
        Command::Eval(a) => commands::eval(a, json),
        Command::Inspect(a) => commands::inspect(a, json),
        Command::Reference(a) => commands::reference(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
