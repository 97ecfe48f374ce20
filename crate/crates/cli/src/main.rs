use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod cmd;

#[derive(Parser)]
#[command(name = "medlego", version, about = "Train, merge and evaluate SVD-structured low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters on one synthetic task
    Train(TrainArgs),
    /// Merge adapter files without training
    Merge(MergeArgs),
    /// Accuracy of an adapter file on a synthetic task split
    Eval(EvalArgs),
    /// Show that averaging factors differs from averaging products
    GapDemo(GapArgs),
    /// Run the full benchmark suite
    Bench(BenchArgs),
    /// Print the contents of an adapter file
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
pub struct TaskArgs {
    #[arg(long, default_value_t = 1)]
    pub task_seed: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..=8))]
    pub classes: u64,
    #[arg(long, default_value_t = 0)]
    pub backbone_seed: u64,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=32))]
    pub rank: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 3e-4, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative)]
    pub reg: f64,
    /// Run seed (adapter init and batch order)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adapter file to write; the learning curve goes next to it as .csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    MedLego,
    PreAvg,
    TaskArith,
}

#[derive(clap::Args)]
pub struct MergeArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::MedLego)]
    pub method: Method,
    /// Fraction of singular mass to keep, in (0, 1]
    #[arg(long, default_value_t = 0.997, value_parser = threshold)]
    pub threshold: f64,
    /// Task-arithmetic scale (default 1/N)
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_rank: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub adapters: PathBuf,
    /// File whose head to use; defaults to the head stored with the adapters
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
}

#[derive(clap::Args)]
pub struct GapArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Merge an adapter with itself (the gap must vanish)
    #[arg(long)]
    pub identical: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SuiteName {
    Default,
    Tiny,
}

#[derive(clap::Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = SuiteName::Default)]
    pub suite: SuiteName,
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent training runs (1 = sequential)
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(clap::Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn threshold(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd::train(a),
        Command::Merge(a) => cmd::merge(a),
        Command::Eval(a) => cmd::eval(a),
        Command::GapDemo(a) => cmd::gap_demo(a),
        Command::Bench(a) => cmd::bench(a),
        Command::Inspect(a) => cmd::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
