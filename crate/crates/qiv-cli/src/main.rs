mod csv_io;
mod report;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qiv::QivError;

/// Batch front end for quasi-instrumental-variable ATT estimation.
#[derive(Debug, Parser)]
#[command(name = "qiv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Input CSV file (mandatory header row).
    #[arg(long)]
    input: std::path::PathBuf,
    /// Outcome column (binary).
    #[arg(long)]
    outcome: String,
    /// Treatment column (binary).
    #[arg(long)]
    treatment: String,
    /// Quasi-instrument column; repeat for multiple instruments.
    #[arg(long = "qiv", required = true)]
    qiv: Vec<String>,
    /// Covariate columns (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Mean-center covariates for optimizer conditioning (coefficients
    /// then refer to centered covariates; recorded in the report).
    #[arg(long, default_value_t = false)]
    center: bool,
}

#[derive(Debug, Clone, Args)]
struct OutputArgs {
    /// Output directory for report files.
    #[arg(long, default_value = ".")]
    out: std::path::PathBuf,
    /// Confidence level for intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Maximum likelihood fit of the GOP outcome model with the plug-in ATT.
    FitMle {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Triply robust ATT estimation (one report section per instrument).
    FitTr {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Tests of the causal null hypothesis.
    TestNull {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Which test(s): mle = likelihood ratio, tr = doubly robust score.
        #[arg(long, default_value = "both", value_parser = ["mle", "tr", "both"])]
        method: String,
    },
    /// Nonparametric identification on discrete covariate strata.
    Identify {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Simulate a dataset from the built-in data-generating process.
    Simulate {
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, default_value = "all-correct")]
        scenario: String,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Monte Carlo study across replicates.
    Mc {
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, default_value = "all-correct")]
        scenario: String,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Estimators to run.
        #[arg(long, default_value = "both", value_parser = ["mle", "tr", "both"])]
        method: String,
    },
}

/// Exit codes: 0 success, 2 configuration error, 3 data error,
/// 4 numerical failure.
fn exit_code_for(e: &QivError) -> u8 {
    match e {
        QivError::UnknownColumn(_) | QivError::Data(_) | QivError::EmptyCell(_) => 3,
        QivError::Domain(_) | QivError::Dimension(_) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match report::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(report::CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(report::CliError::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(3)
        }
        Err(report::CliError::Qiv(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
