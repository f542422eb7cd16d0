mod commands;
mod output;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointnorm::ErrorCategory;

#[derive(Parser, Debug)]
#[command(name = "jointnorm", version, about = "Jointly normal priors with uncertain cross-correlation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw fields from the joint priors of the rectangle and boundary examples.
    SamplePrior(Common),
    /// Realised pointwise correlation for principal-root versus Cholesky filters in 1D.
    FactorCompare(Common),
    /// Fixed-correlation posterior scans and full MCMC for the Monod model.
    Monod(Common),
    /// Co-kriging of two fields with an inferred scalar correlation.
    Cokrige(Common),
    /// Darcy flow with a piecewise correlation between log-permeability and recharge.
    Darcy(Common),
    /// Run the property checks and print a pass/fail table.
    Verify(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file; missing keys take their defaults, unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `out/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiply mesh and observation counts per direction.
    #[arg(long)]
    pub scale: Option<f64>,
    /// MCMC iterations including burn-in, or the number of prior draws.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Start from the full-size configuration instead of the scaled default.
    #[arg(long)]
    pub full_scale: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(jointnorm::Error),
    ChecksFailed(usize),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::ChecksFailed(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl From<jointnorm::Error> for CliError {
    fn from(e: jointnorm::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Model => 3,
                ErrorCategory::Numeric => 4,
            },
            CliError::Io(_) => 5,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match &cli.command {
        Command::SamplePrior(a) => ("sample-prior", commands::sample_prior(a)),
        Command::FactorCompare(a) => ("factor-compare", commands::factor_compare(a)),
        Command::Monod(a) => ("monod", commands::monod(a)),
        Command::Cokrige(a) => ("cokrige", commands::cokrige(a)),
        Command::Darcy(a) => ("darcy", commands::darcy(a)),
        Command::Verify(a) => ("verify", commands::verify(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jointnorm {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
