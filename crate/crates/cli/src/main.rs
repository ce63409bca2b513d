use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twophase_gmm::design::PiMode;
use twophase_gmm::study::{self, StudyConfig};
use twophase_gmm::{io, Error};

/// Two-phase GMM logistic regression: single fits and Monte Carlo studies.
#[derive(Parser)]
#[command(name = "twophase", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one population and write phase-I/phase-II files, design and model config.
    Simulate(StudyArgs),
    /// Fit one dataset.
    Fit(FitArgs),
    /// Run a Monte Carlo study.
    Mc(StudyArgs),
}

#[derive(Args)]
struct StudyArgs {
    /// Study configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `reps`.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// known | empirical
    #[arg(long)]
    pi_mode: Option<PiMode>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Phase-I CSV: `id,y,s,<columns>`.
    #[arg(long)]
    phase1: PathBuf,
    /// Phase-II CSV: `id,<columns>`.
    #[arg(long)]
    phase2: PathBuf,
    /// Design file with `strata = J` and `cell = d s N_ds n_ds pi` lines.
    #[arg(long)]
    design: PathBuf,
    /// Model configuration (TOML with `reduced` and `full`).
    #[arg(long)]
    model: PathBuf,
    /// Override the model config's `pi_mode`.
    #[arg(long)]
    pi_mode: Option<PiMode>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_study(args: &StudyArgs) -> twophase_gmm::Result<(StudyConfig, PathBuf)> {
    let mut cfg = StudyConfig::from_toml(&fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(mode) = args.pi_mode {
        cfg.pi_mode = mode;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> twophase_gmm::Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (cfg, out) = load_study(&args)?;
            study::simulate(cfg, &out)?;
            log::info!("wrote simulated files to {}", out.display());
        }
        Command::Mc(args) => {
            let (cfg, out) = load_study(&args)?;
            let result = study::run_mc(cfg, args.threads)?;
            study::write_outputs(&result, &out)?;
            log::info!(
                "{} of {} replicates succeeded; results in {}",
                result.replicates.len(),
                result.config.reps,
                out.display()
            );
        }
        Command::Fit(args) => {
            let p1 = io::read_phase1(&args.phase1)?;
            let p2 = io::read_phase2(&args.phase2)?;
            let design =
                twophase_gmm::design::TwoPhaseDesign::parse(&fs::read_to_string(&args.design)?)?;
            let mut model = io::ModelConfig::from_toml(&fs::read_to_string(&args.model)?)?;
            if let Some(mode) = args.pi_mode {
                model.pi_mode = mode;
            }
            let report = io::fit_tables(&p1, &p2, &design, &model)?;
            match args.out {
                Some(path) => fs::write(path, report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::TooManyFailures { .. } => ExitCode::from(3),
                e if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
