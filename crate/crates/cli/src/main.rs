mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kmn", version, about = "Kinematic morphing networks: data generation, training and evaluation")]
struct Cli {
    /// Worker threads for generation, augmentation and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a seeded dataset of random instances.
    Generate(GenerateArgs),
    /// Train the regressor on a dataset.
    Train(TrainArgs),
    /// Compare trained networks on a dataset.
    Eval(EvalArgs),
    /// Write sample depth images with label sidecars.
    RenderSamples(RenderArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file, or the manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $KMN_OUTPUT_ROOT/<command>-<task>-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = task_name)]
    task: Option<String>,
    /// Number of records.
    #[arg(long)]
    n: Option<usize>,
    /// Schema file replacing the task's built-in schema.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Kmn,
    Baseline,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Kmn)]
    mode: Mode,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Outer augmentation rounds (ignored in baseline mode).
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    n_aug: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    /// KMN weights.
    #[arg(long)]
    weights: PathBuf,
    /// Baseline weights.
    #[arg(long)]
    baseline: PathBuf,
    /// Also align with ICP (rigid tasks without configuration parameters only).
    #[arg(long)]
    icp: bool,
    #[arg(long)]
    n_pred: Option<usize>,
    /// Best and worst test records to write as images.
    #[arg(long)]
    gallery: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = task_name)]
    task: Option<String>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    schema: Option<PathBuf>,
}

fn task_name(s: &str) -> Result<String, String> {
    s.parse::<kmn_core::Task>().map(|t| t.name().to_string()).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --workers: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::RenderSamples(a) => commands::render_samples(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
