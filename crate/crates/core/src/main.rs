use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinetic_annihilation::harness::{execute, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "kinann", version, about = "Annihilating kinetic particles and their mean-field limit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run particle ensembles and write snapshots, events and mass curves.
    Simulate(Common),
    /// Solve the kinetic equation on a phase grid.
    SolvePde(Common),
    /// Compare particle ensembles to the PDE solution across the N ladder.
    Compare(Common),
    /// Tabulate kernel normalization, Chapman–Kolmogorov and bound checks.
    KernelCheck(Common),
    /// Martingale residuals of the empirical-measure identity.
    Audit(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the reference setup is used if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seeds per ladder entry, overriding the config.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads, overriding the config.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::SolvePde(a) => (Mode::SolvePde, a),
        Command::Compare(a) => (Mode::Compare, a),
        Command::KernelCheck(a) => (Mode::KernelCheck, a),
        Command::Audit(a) => (Mode::Audit, a),
    };
    match run(mode, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(mode: Mode, args: Common) -> kinetic_annihilation::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::reference(mode),
    };
    if cfg.mode != mode {
        log::info!("config mode {:?} overridden by subcommand {:?}", cfg.mode, mode);
        cfg.mode = mode;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    log::info!("config hash {}", cfg.hash());
    execute(&cfg, &args.out)?;
    log::info!("wrote {}", args.out.join("report.json").display());
    Ok(())
}
