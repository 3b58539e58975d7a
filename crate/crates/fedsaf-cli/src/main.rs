//! Command-line driver: run one experiment, the component ablation grid,
//! or a hyperparameter sweep, from a TOML config plus override flags.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedsaf_core::config::{resolve_config, Overrides};
use fedsaf_core::runner::{
    ablation_csv, run_ablation, run_sweep, run_to_dir, sweep_csv, SweepParameter,
};
use fedsaf_core::{DatasetKind, DistanceMetric, StrategyKind};

#[derive(Parser)]
#[command(
    name = "fedsaf",
    about = "Deterministic federated-learning simulator",
    version,
    after_help = "Defaults: strategy=fedsaf, rounds=30, dm=manhattan, nhead=0 (splitting off), \
                  lambda=1.0, alpha=0.1 (similarity scale), sigma=1.0, lr=0.05, \
                  local_epochs=5, prox_steps=5, batch_size=32, tfim_batch=64, mu_prox=0.01. \
                  The FEDSAF_OUTPUT_DIR environment variable overrides output_dir; \
                  a --output-dir flag wins over both."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json, and the
    /// resolved config to the output directory.
    Run(RunArgs),
    /// Run the 2x2 ablation grid {FIM on/off} x {model splitting on/off}
    /// with a shared seed and write a comparison table.
    Ablate(RunArgs),
    /// Run once per value of a swept hyperparameter (nhead or dm) with a
    /// shared seed and write a comparison table.
    Sweep(SweepArgs),
    /// Parse and validate a config, then print the resolved TOML.
    ValidateConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Strategy: fedsaf, fedavg, fedprox, fedamp, fedrep.
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Communication rounds (K).
    #[arg(long)]
    rounds: Option<usize>,
    /// Master seed driving data, init, and every client RNG stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset: synthetic, fashion_mnist_idx, csv.
    #[arg(long)]
    dataset: Option<String>,
    /// Number of clients (m).
    #[arg(long)]
    clients: Option<usize>,
    /// Classes per client (S).
    #[arg(long)]
    classes_per_client: Option<usize>,
    /// Size-skew exponent.
    #[arg(long)]
    unbalance: Option<f64>,
    /// Personalized head depth; 0 disables splitting.
    #[arg(long)]
    nhead: Option<usize>,
    /// Distance metric: euclidean, manhattan, cosine.
    #[arg(long)]
    dm: Option<String>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Proximal penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Similarity scaling factor.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attention scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Enable or disable Fisher-trace weighting.
    #[arg(long)]
    fim: Option<bool>,
    /// Comma-separated straggler client ids.
    #[arg(long, value_delimiter = ',')]
    stragglers: Option<Vec<usize>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker-thread cap (0 = library default); never affects results.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Hyperparameter to sweep: nhead or dm.
    #[arg(long)]
    parameter: String,
    /// Comma-separated values, e.g. 0,1,2 or euclidean,manhattan,cosine.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<fedsaf_core::ExperimentConfig> {
        let overrides = Overrides {
            strategy: self.strategy,
            rounds: self.rounds,
            master_seed: self.seed,
            dataset: self
                .dataset
                .as_deref()
                .map(str::parse::<DatasetKind>)
                .transpose()?,
            clients: self.clients,
            classes_per_client: self.classes_per_client,
            unbalance: self.unbalance,
            nhead: self.nhead,
            dm: self
                .dm
                .as_deref()
                .map(str::parse::<DistanceMetric>)
                .transpose()?,
            lr: self.lr,
            lambda: self.lambda,
            alpha: self.alpha,
            sigma: self.sigma,
            use_fim: self.fim,
            stragglers: self.stragglers.clone(),
            output_dir: self.output_dir.clone(),
            threads: self.threads,
        };
        Ok(resolve_config(self.config.as_deref(), &overrides)?)
    }
}

/// Run `f` inside a rayon pool capped at `threads` workers (0 keeps the
/// library default). The cap changes wall-clock time only, never results.
fn with_thread_cap<T>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the worker pool")?;
    pool.install(f)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let artifacts = with_thread_cap(config.threads, || Ok(run_to_dir(&config)?))?;
    let last = artifacts.log.final_row().context("empty metrics log")?;
    println!(
        "{} rounds of {} on {} clients: avg test acc {:.4} (std {:.4}), avg test auc {:.4}",
        config.rounds,
        config.strategy,
        config.data.clients,
        last.avg_test_acc,
        last.std_test_acc,
        last.avg_test_auc,
    );
    println!("metrics: {}", artifacts.metrics_csv.display());
    println!("summary: {}", artifacts.summary_json.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let cells = with_thread_cap(config.threads, || Ok(run_ablation(&config)?))?;
    let table = ablation_csv(&cells);
    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join("ablation.csv");
    std::fs::write(&path, &table)?;
    print!("{table}");
    println!("ablation table: {}", path.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let parameter: SweepParameter = args.parameter.parse()?;
    let rows = with_thread_cap(config.threads, || {
        Ok(run_sweep(&config, parameter, &args.values)?)
    })?;
    let table = sweep_csv(parameter, &rows);
    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(format!("sweep_{parameter}.csv"));
    std::fs::write(&path, &table)?;
    print!("{table}");
    println!("sweep table: {}", path.display());
    Ok(())
}

fn cmd_validate(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    print!("{}", config.to_toml()?);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ValidateConfig(args) => cmd_validate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
