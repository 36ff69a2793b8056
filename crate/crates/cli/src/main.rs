use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tinyde_cli::{execute, resolve_data_dir, CliResult, ExperimentConfig, TaskId};

/// Tiny deep ensembles: benchmark reproduction, uncertainty, cost and
/// compute-in-memory studies.
#[derive(Parser)]
#[command(name = "tinyde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Regression benchmarks: per-fold RMSE and NLL against reference bands.
    ReproduceUci(Common),
    /// Entropy and disagreement on in-distribution and shifted blobs.
    Ood(Common),
    /// Parameter, memory and latency census across ensemble methods.
    Cost(Common),
    /// Output fidelity of the compute-in-memory simulator versus converter bits.
    Cim(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for folds or ensemble sizes.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `results/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory; falls back to the config, then TINYDE_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn run(task: TaskId, args: Common) -> CliResult<Vec<PathBuf>> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(task.id()));
    let data_dir = resolve_data_dir(args.data_dir, &cfg);
    let command: Vec<String> = std::env::args().collect();
    execute(task, &cfg, &data_dir, &out, &command.join(" "))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::ReproduceUci(a) => (TaskId::UciRegression, a),
        Command::Ood(a) => (TaskId::OodClassification, a),
        Command::Cost(a) => (TaskId::CostCensus, a),
        Command::Cim(a) => (TaskId::CimStudy, a),
    };
    match run(task, args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tinyde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
