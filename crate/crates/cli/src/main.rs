mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voltrisk::nn::LossMode;
use voltrisk::trainer::{OptimizerKind, TrainConfig};

use output::{DEFAULT_OUT, OUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "voltrisk", version, about = "Risk-aware learning of reactive-power dispatch policies")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize (or read) operating conditions and label them with optimal dispatch.
    GenData(GenDataArgs),
    /// Train one policy on a dataset.
    Train(TrainArgs),
    /// Score a trained policy on a dataset split.
    Eval(EvalArgs),
    /// Tabulate several trained policies side by side.
    Compare(CompareArgs),
    /// Train every arm of an experiment config and compare them.
    Experiment(ExperimentArgs),
    /// Solve the dispatch problem for one operating condition.
    SolveOpf(SolveOpfArgs),
    /// VaR and CVaR of a column of losses.
    Risk(RiskArgs),
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = DEFAULT_OUT)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Read operating conditions from a profile CSV instead of synthesizing them.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    minutes_per_sample: usize,
    #[arg(long, default_value_t = 1.0)]
    load_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pv_peak: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = voltrisk::opf::DEFAULT_TOL)]
    tol: f64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long, default_value = "mse")]
    mode: LossMode,
    /// Skip batches whose CVaR falls below the running threshold.
    #[arg(long)]
    select: bool,
    /// Keep the selection threshold across epochs instead of resetting it.
    #[arg(long)]
    global_threshold: bool,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_q: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_v: f64,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1e-3)]
    tau_q: f64,
    #[arg(long, default_value_t = 1e-3)]
    tau_v: f64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            alpha: self.alpha,
            lambda_q: self.lambda_q,
            lambda_v: self.lambda_v,
            eta: self.eta,
            batch_size: self.batch_size,
            epsilon: self.epsilon,
            max_epochs: self.max_epochs,
            selection_enabled: self.select,
            threshold_reset: !self.global_threshold,
            optimizer: self.optimizer,
            tau_q: self.tau_q,
            tau_v: self.tau_v,
            hidden: self.hidden.clone(),
            seed: voltrisk::experiment::SeedPlan::expand(self.seed).train,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Arm name; also the stem of the output files.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Risk level; defaults to the one the model was trained with.
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Also write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trained `<stem>.model.json` files; summaries and logs are found by stem.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args, Debug)]
struct SolveOpfArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Take the condition from this profile CSV (with --t).
    #[arg(long, requires = "t")]
    profiles: Option<PathBuf>,
    #[arg(long)]
    t: Option<usize>,
    /// Per-bus active generation in feeder bus order.
    #[arg(long, value_delimiter = ',', conflicts_with = "profiles")]
    pg: Vec<f64>,
    /// Per-bus active load in feeder bus order.
    #[arg(long, value_delimiter = ',', conflicts_with = "profiles")]
    pc: Vec<f64>,
    /// Per-bus reactive load in feeder bus order.
    #[arg(long, value_delimiter = ',', conflicts_with = "profiles")]
    qc: Vec<f64>,
    #[arg(long, default_value_t = voltrisk::opf::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct RiskArgs {
    /// CSV whose first column holds the losses (an optional header is skipped).
    losses: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::SolveOpf(a) => commands::solve_opf(a),
        Command::Risk(a) => commands::risk(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
