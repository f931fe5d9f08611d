use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairprobe::hashing::config_hash;
use fairprobe::pipeline::{
    build_report, check_dataset, generate_dataset, init_threads, parse_stages, read_json_file, run_experiment,
    verify_run, ExperimentConfig, Stage,
};
use fairprobe::synthcohort::{CohortConfig, DEFAULT_MIN_USERS};
use fairprobe::Error;

/// Fairness assessment of contrastive self-supervised models on
/// multivariate time series.
#[derive(Parser)]
#[command(name = "fairprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Config file: cohort config for `generate`, dataset manifest for
    /// `check`, experiment config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (dataset for `generate`, run directory otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated stages for `run`, e.g. `grid,evaluate`.
    #[arg(long, global = true)]
    stages: Option<String>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort and its manifest.
    Generate,
    /// Check a dataset manifest against the dataset requirements.
    Check {
        #[arg(long, default_value_t = DEFAULT_MIN_USERS)]
        min_users: usize,
    },
    /// Contrastive pretraining.
    Pretrain,
    /// Fine-tune every strategy of the grid.
    Grid,
    /// Fairness suite for every trained strategy.
    Evaluate,
    /// Conditioned CKA between the best SSL model and the supervised baseline.
    Cka,
    /// Data-efficiency sweep.
    Sweep,
    /// Run the pipeline (all configured stages unless --stages is given).
    Run,
    /// Consolidate a run directory into plot-ready tables.
    Report,
    /// Re-hash a run's artifacts and detect tampering.
    Verify,
}

fn required_config(g: &Global) -> Result<&Path, Error> {
    g.config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))
}

fn experiment(g: &Global) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(required_config(g)?)?;
    if let Some(out) = &g.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run_dir(g: &Global) -> Result<PathBuf, Error> {
    match (&g.out, &g.config) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(_)) => Ok(experiment(g)?.output),
        (None, None) => Err(Error::Config("--out or --config is required".into())),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let g = &cli.global;
    if g.stages.is_some() && !matches!(cli.command, Command::Run) {
        return Err(Error::Config("--stages only applies to `run`".into()));
    }
    match cli.command {
        Command::Generate => {
            let mut cfg: CohortConfig = match &g.config {
                Some(p) => read_json_file(p)?,
                None => CohortConfig::default(),
            };
            if let Some(seed) = g.seed {
                cfg.seed = seed;
            }
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let manifest = generate_dataset(&cfg, &out, g.force)?;
            println!("manifest: {}", manifest.display());
            println!("config_hash: {}", config_hash(&cfg)?);
        }
        Command::Check { min_users } => {
            let report = check_dataset(required_config(g)?, min_users)?;
            for c in &report.checks {
                println!("{:<22} {}  {}", c.requirement, if c.passed { "pass" } else { "FAIL" }, c.reason);
            }
            if !report.all_passed() {
                return Err(Error::Config("dataset does not meet every requirement".into()));
            }
        }
        Command::Pretrain | Command::Grid | Command::Evaluate | Command::Cka | Command::Sweep | Command::Run => {
            let stages = match cli.command {
                Command::Pretrain => Some(vec![Stage::Pretrain]),
                Command::Grid => Some(vec![Stage::Grid]),
                Command::Evaluate => Some(vec![Stage::Evaluate]),
                Command::Cka => Some(vec![Stage::Cka]),
                Command::Sweep => Some(vec![Stage::Sweep]),
                _ => g.stages.as_deref().map(parse_stages).transpose()?,
            };
            let cfg = experiment(g)?;
            let out = cfg.output.clone();
            let record = run_experiment(cfg, stages.as_deref(), g.force)?;
            println!("run: {}", out.display());
            println!("config_hash: {}", record.config_hash);
            for (stage, rec) in &record.stages {
                println!("  {stage}: {} artifact(s)", rec.artifacts.len());
            }
        }
        Command::Report => {
            for path in build_report(&run_dir(g)?)? {
                println!("{}", path.display());
            }
        }
        Command::Verify => {
            let expected = match &g.config {
                Some(_) => Some(experiment(g)?.hash()?),
                None => None,
            };
            let n = verify_run(&run_dir(g)?, expected.as_deref())?;
            println!("verified {n} artifact(s)");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
