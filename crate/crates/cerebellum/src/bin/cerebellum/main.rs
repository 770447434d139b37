//! `cerebellum` command-line harness.
//!
//! Exit codes: 0 success, 1 failed gates or sweep points, 2 configuration
//! error, 3 data or IO error, 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cerebellum::data::DATA_DIR_ENV;

#[derive(Parser, Debug)]
#[command(
    name = "cerebellum",
    version,
    about = "Train and attack cerebellum-like networks"
)]
struct Cli {
    /// Print a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Run the attack protocol against a checkpoint.
    Attack(AttackArgs),
    /// Execute a sweep plan into a result store.
    Sweep(SweepArgs),
    /// Cross-seed transfer matrix.
    Transfer(TransferArgs),
    /// Plot-data CSVs and a summary from a result store.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the MNIST IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Training feature container (instead of MNIST).
    #[arg(long, requires = "test_features")]
    train_features: Option<PathBuf>,
    /// Test feature container (instead of MNIST).
    #[arg(long)]
    test_features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with any of: preset, m, k, ltd, seed, hyperparams, train_limit, desk.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named network preset; see `NetworkConfig::PRESETS`.
    #[arg(long)]
    preset: Option<String>,
    /// Granule cells [default: 5000].
    #[arg(long)]
    m: Option<usize>,
    /// Inputs per granule cell [default: d, dense].
    #[arg(long)]
    k: Option<usize>,
    /// Enable LTD centering.
    #[arg(long)]
    ltd: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate is this over m [default: 0.5].
    #[arg(long)]
    lr_numerator: Option<f64>,
    /// RMSprop decay [default: 0.99].
    #[arg(long)]
    decay: Option<f64>,
    /// LTD decay beta [default: 0.99].
    #[arg(long)]
    beta: Option<f64>,
    /// Train on the first N training instances.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Desk scale: cap m at 20000 and epochs at 3.
    #[arg(long)]
    desk: bool,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnlyArg {
    Fgsm,
    Pgd,
    Unbounded,
    Doubling,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// l∞ budgets [default: 0.1,0.3 on MNIST; required for feature files].
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f64>,
    /// Run only these stages.
    #[arg(long, value_enum, value_delimiter = ',')]
    only: Vec<OnlyArg>,
    #[arg(long, default_value_t = cerebellum_core::attacks::PGD_STEPS)]
    steps: usize,
    /// PGD step [default: 0.01; 2.5 eps / steps on feature files].
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 0)]
    attack_seed: u64,
    #[arg(long, default_value_t = cerebellum::protocol::UNBOUNDED_STEPS)]
    unbounded_steps: usize,
    /// [default: 0.01; 1% of the data range on feature files]
    #[arg(long)]
    unbounded_step_size: Option<f64>,
    #[arg(long, default_value_t = cerebellum::protocol::DOUBLING_START)]
    doubling_start: usize,
    #[arg(long, default_value_t = cerebellum::protocol::DOUBLINGS)]
    doublings: u32,
    /// Budget of the doubling test [default: first of --epsilons].
    #[arg(long)]
    doubling_epsilon: Option<f64>,
    /// Attack N test instances drawn with --subsample-seed instead of all.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
    /// Clean inputs sampled for the gradient histogram.
    #[arg(long, default_value_t = 256)]
    histogram_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Plan JSON file.
    #[arg(long)]
    plan: PathBuf,
    /// Result store directory (created if missing).
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Seeds of the models, at least two.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 123])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = cerebellum::experiments::TRANSFER_DEFAULT_M)]
    m: usize,
    /// [default: d, dense]
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    ltd: bool,
    /// [default: 3 (desk scale)]
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subsample_seed: u64,
    #[arg(long)]
    train_limit: Option<usize>,
    /// Lift the desk-scale caps.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Attack(a) => commands::attack(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(out) => {
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&out.json).expect("JSON output")
                );
            } else {
                print!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(commands::Failure { error, output }) => {
            let code = error.exit_code();
            if let Some(out) = output {
                if cli.json {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&out.json).expect("JSON output")
                    );
                } else {
                    print!("{}", out.text);
                }
            } else if cli.json {
                let v = serde_json::json!({ "error": error.to_string(), "exit_code": code });
                println!("{}", serde_json::to_string_pretty(&v).expect("JSON output"));
            }
            eprintln!("error: {error}");
            ExitCode::from(code as u8)
        }
    }
}
