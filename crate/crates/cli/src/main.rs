use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metasim::Engine;

mod analyze;
mod run;

/// Stochastic metapopulation simulator.
#[derive(Parser)]
#[command(name = "metasim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a model file or a built-in scenario.
    Run(RunArgs),
    /// Report on trajectory CSVs.
    Analyze(AnalyzeArgs),
    /// Print every built-in scenario id.
    ListScenarios,
    /// Print the model file of a built-in scenario.
    Emit {
        #[arg(long)]
        scenario: String,
    },
}

#[derive(Args)]
pub struct RunArgs {
    /// `.mps` model file.
    #[arg(conflicts_with = "scenario", required_unless_present = "scenario")]
    pub model: Option<PathBuf>,
    /// Built-in scenario, e.g. `migration:star:cond4` or `colonization:grid:IC1:p0`.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Master seed; replicate k uses seed + k.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub replicates: u64,
    #[arg(long)]
    pub engine: Option<Engine>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub record_interval: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Summary,
    Colonization,
    Symmetry,
    Phase,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum, default_value = "summary")]
    pub mode: Mode,
    /// Report file (default: stdout). For `phase`, the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "X")]
    pub prey: String,
    #[arg(long, default_value = "Y")]
    pub predator: String,
    /// Patch pairs for `symmetry`, e.g. `p0:p5,p1:p4`. Defaults to mirror pairs.
    #[arg(long)]
    pub pairs: Option<String>,
    pub csv: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Analyze(args) => analyze::cmd_analyze(&args),
        Command::ListScenarios => {
            for s in metasim::topology::all_scenarios() {
                println!("{s}");
            }
            Ok(())
        }
        Command::Emit { scenario } => run::cmd_emit(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metasim: {e}");
            ExitCode::from(e.code())
        }
    }
}
