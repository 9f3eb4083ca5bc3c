use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leopard::harness::{
    diagnose, label_proportion_sweep, run_experiment, write_diagnose, write_streams, Ablation, ExperimentConfig, Method,
};
use leopard::LeopardError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "leopard", version, about = "Streaming cross-domain classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic streams of every seed as CSV files.
    Generate(CommonArgs),
    /// Run LEOPARD under the prequential protocol.
    Run(AblationArgs),
    /// Run the autoencoder + k-means comparator.
    Baseline(CommonArgs),
    /// Repeat the experiment for each configured label proportion.
    Sweep(AblationArgs),
    /// Measure the domain divergence of the learned features.
    Diagnose(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment configuration (`{}` selects every default).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "A|B|C|full")]
    ablation: Option<Ablation>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<LeopardError> for Failure {
    fn from(e: LeopardError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(args: &CommonArgs, ablation: Option<Ablation>) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(a) = ablation {
        config.switches = a.switches();
    }
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate(args) => {
            let config = load(&args, None)?;
            for &seed in &config.seeds {
                let dir = config.output_dir.join(format!("seed{seed}"));
                let streams = write_streams(&config, seed, &dir)?;
                println!(
                    "seed {seed}: {} source and {} target batches written to {}",
                    streams.source.len(),
                    streams.target.len(),
                    dir.display()
                );
            }
        }
        Command::Run(args) => {
            let config = load(&args.common, args.ablation)?;
            report("leopard", &config, &run_experiment(&config, Method::Leopard)?.summary);
        }
        Command::Baseline(args) => {
            let config = load(&args, None)?;
            report("ae+kmeans", &config, &run_experiment(&config, Method::AeKmeans)?.summary);
        }
        Command::Sweep(args) => {
            let config = load(&args.common, args.ablation)?;
            let table = label_proportion_sweep(&config, &config.sweep_proportions, true)?;
            for row in &table.rows {
                println!(
                    "p={:<5} accuracy {:.4} ± {:.4}",
                    row.label_proportion, row.mean_accuracy, row.std_accuracy
                );
            }
            println!("spread {:.4}; results in {}", table.spread, config.output_dir.display());
        }
        Command::Diagnose(args) => {
            let config = load(&args, None)?;
            let reports = config
                .seeds
                .iter()
                .map(|&s| diagnose(&config, s))
                .collect::<Result<Vec<_>, _>>()?;
            for r in &reports {
                println!(
                    "seed {}: divergence {:.4} -> {:.4}, per layer {:?}",
                    r.seed, r.divergence_before, r.divergence_after, r.layer_divergence_after
                );
            }
            write_diagnose(&config, &reports)?;
        }
    }
    Ok(())
}

fn report(name: &str, config: &ExperimentConfig, summary: &leopard::harness::ExperimentSummary) {
    println!(
        "{name}: target accuracy {:.4} ± {:.4} over {} runs; results in {}",
        summary.mean_accuracy,
        summary.std_accuracy,
        summary.runs.len(),
        config.output_dir.display()
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
