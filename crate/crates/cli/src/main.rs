use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use scool::experiment::{budget_csv, run_budget_sweep, run_experiment, write_outputs, ExperimentConfig, RunStatus};
use scool::ScoolError;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "scool", version, about = "Run cooperative learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report, metrics and snapshots.
    Run(RunArgs),
    /// Rerun the experiment once per neighbor fraction and tabulate accuracy against traffic.
    SweepBudget {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated fractions of neighbors kept after pruning.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,1.0")]
        fractions: Vec<f64>,
    },
    /// Check a config file and print it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(String),
}

impl From<ScoolError> for Failure {
    fn from(e: ScoolError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else if e.is_divergence() {
            Failure::Diverged(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Run(args) => run(&args),
        Command::SweepBudget { run, fractions } => sweep(&run, &fractions),
        Command::ValidateConfig { config } => validate(&config),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("diverged: {m}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SCOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("SCOOL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Other(e.to_string()))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(every) = args.snapshot_every {
        cfg.snapshot_every = every;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    create_dir(&args.out)?;
    let start = Instant::now();
    let out = run_experiment(&cfg)?;
    let wall = start.elapsed().as_secs_f64();
    write_outputs(&out, &args.out)?;
    // kept out of report.json so reruns stay byte-identical
    write(
        &args.out.join("timing.json"),
        &serde_json::json!({ "wall_seconds": wall }).to_string(),
    )?;
    let r = &out.report;
    if let Some(last) = r.rounds.last() {
        println!(
            "{:?} rounds={} acc={:.4} l1={:.4} units={}",
            cfg.prior,
            r.rounds.len(),
            last.mean_test_acc,
            last.l1,
            r.total_units
        );
    }
    match &r.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { detail, .. } => Err(Failure::Diverged(detail.clone())),
    }
}

fn sweep(args: &RunArgs, fractions: &[f64]) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    if fractions.is_empty() {
        return Err(Failure::Config("no fractions given".into()));
    }
    create_dir(&args.out)?;
    let rows = run_budget_sweep(&cfg, fractions)?;
    let csv = budget_csv(&rows);
    write(&args.out.join("budget.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(path)?;
    println!("{}", cfg.to_json());
    Ok(())
}
