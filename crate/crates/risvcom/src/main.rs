//! Batch experiment runner. Each subcommand loads a scenario config (desk
//! scale by default, `--full-scale` for the full system size), runs one
//! seeded experiment suite, and writes `<out>/<experiment>.csv` plus a run
//! manifest.

use clap::{Parser, Subcommand};
use risvcom::config::ScenarioConfig;
use risvcom::experiments::{
    cmd_bb_allocate, cmd_nb_convergence, cmd_nmse_vs_blocks, cmd_rate_vs_blocks,
    cmd_rate_vs_speed, ExperimentError, ResultTable,
};
use risvcom::resource_alloc::ResourceError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "risvcom", version, about = "RIS-aided vehicular MIMO experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario config JSON; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Number of seeds (overrides the config value).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Output directory for CSV and manifest files.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Use the full-scale system dimensions instead of the fast desk-scale
    /// preset (minutes instead of seconds).
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimation NMSE versus number of pilot blocks.
    Nmse,
    /// Narrowband alternating-optimization convergence traces.
    NbConverge,
    /// Data rate versus number of pilot blocks.
    RateVsBlocks,
    /// Overhead-discounted achievable rate versus vehicle speed.
    RateVsSpeed,
    /// Broadband multi-VUE allocation traces and carrier-count sweep.
    BbAllocate,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn load_config(cli: &Cli) -> Result<ScenarioConfig, risvcom::config::ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None if cli.full_scale => ScenarioConfig::default(),
        None => ScenarioConfig::desk_scale(),
    };
    if let Some(seeds) = cli.seeds {
        cfg.seeds = seeds;
    }
    cfg = cfg.apply_env_overrides()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ResultTable, ExperimentError> {
    let cfg = load_config(cli)?;
    let table = match cli.command {
        Command::Nmse => cmd_nmse_vs_blocks(&cfg)?,
        Command::NbConverge => cmd_nb_convergence(&cfg)?,
        Command::RateVsBlocks => cmd_rate_vs_blocks(&cfg)?,
        Command::RateVsSpeed => cmd_rate_vs_speed(&cfg)?,
        Command::BbAllocate => cmd_bb_allocate(&cfg)?,
    };
    table.write(&cli.out)?;
    Ok(table)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(table) => {
            println!(
                "{}: {} rows -> {}",
                table.experiment,
                table.rows.len(),
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                ExperimentError::Config(_) => EXIT_CONFIG,
                ExperimentError::Resource(ResourceError::QoSInfeasible) => EXIT_INFEASIBLE,
                ExperimentError::Io(_) => EXIT_NUMERICAL,
                _ => EXIT_NUMERICAL,
            };
            ExitCode::from(code)
        }
    }
}
