//! `sdfl`: schedules, aggregation runs, reconstruction attacks, federated
//! training and sweeps from the command line.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdfl_core::fedtrain::TrainMode;

pub const EXIT_INVALID_SCHEDULE: u8 = 3;
pub const EXIT_UNIQUE: u8 = 10;

#[derive(Parser, Debug)]
#[command(name = "sdfl", version, about = "Grouped ADMM aggregation for decentralized federated learning")]
pub struct Cli {
    /// Directory for outputs written under their default names.
    #[arg(long, global = true, env = "SDFL_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    /// Base seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate or check group schedules.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Run ADMM averaging over a set of input vectors.
    Aggregate(AggregateArgs),
    /// Reconstruct a peer's input from a transcript, as seen by one observer.
    Attack(AttackArgs),
    /// Federated training on synthetic or CSV data.
    Train(TrainArgs),
    /// Parameter sweeps written as CSV.
    #[command(subcommand)]
    Sweep(SweepCmd),
}

#[derive(Args, Debug, Clone)]
pub struct BudgetArgs {
    /// Random block draws per class before a restart.
    #[arg(long, default_value_t = 20_000)]
    pub max_attempts: usize,
    /// Consecutive failed class restarts before stopping.
    #[arg(long, default_value_t = 200)]
    pub max_restarts: usize,
    /// Stop after this many classes.
    #[arg(long)]
    pub target_classes: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum ScheduleCmd {
    /// Search for a schedule and write it as JSON.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        s: usize,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Output path (default: <out-dir>/schedule.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a schedule file; exits with 3 when it has violations.
    Check { file: PathBuf },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    All,
    Grouped,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// JSON array of inputs, each a number array or `{"data": [...], "shape": [...]}`.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    #[arg(long, value_enum, default_value_t = AggMode::Grouped)]
    pub mode: AggMode,
    /// Schedule file for grouped mode.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Generate a schedule with this group size when no file is given.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Start every dual at zero instead of uniform [0, 1).
    #[arg(long)]
    pub lambda_zero: bool,
    /// Permit more iterations than the schedule keeps private.
    #[arg(long)]
    pub allow_unsafe: bool,
    /// Consensus output (default: <out-dir>/z_final.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration table (default: <out-dir>/trace.csv).
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Also write the message transcript as JSONL.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    System,
    ClosedForm,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long)]
    pub observer: usize,
    #[arg(long)]
    pub target: usize,
    /// Iterations the attacker uses (default: all in the transcript).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum, default_value_t = AttackMethod::System)]
    pub method: AttackMethod,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArg {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(TrainMode))]
    pub mode: Option<TrainMode>,
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synth` or `csv:<path>`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Report path (default: <out-dir>/report.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// ADMM iterations per aggregation.
    #[arg(long)]
    pub admm_iters: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Exchange with every peer instead of following a schedule.
    #[arg(long)]
    pub all_to_all: bool,
    #[arg(long)]
    pub allow_unsafe: bool,
    #[arg(long)]
    pub peers: Option<usize>,
    #[arg(long)]
    pub samples_per_peer: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub heterogeneity: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum SweepCmd {
    /// Mean MSE to the exact average against iteration count.
    Iters {
        #[arg(long, default_value_t = 9)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        s: usize,
        #[arg(long)]
        all_to_all: bool,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, value_delimiter = ',', default_value = "10000")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        first: u64,
        #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(1..))]
        last: u64,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        allow_unsafe: bool,
        /// Report the first iteration whose mean MSE falls below this.
        #[arg(long)]
        below: Option<f64>,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Table path (default: <out-dir>/mse_sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parallel-class counts against peer count.
    Schedule {
        #[arg(long, value_delimiter = ',', default_value = "9,15,21,27")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        s: usize,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Table path (default: <out-dir>/class_counts.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::run(cli, &argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
