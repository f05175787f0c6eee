//! `dynshare` command-line runner.
//!
//! Each subcommand resolves its parameters (defaults, then `--config`, then
//! flags), writes CSVs into `--out`, and leaves a `manifest.txt` there that
//! `dynshare --replay` can rerun.

mod commands;
mod manifest;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::{
    CompareFlags, FixedPointFlags, NoiseFloorFlags, SleepIdealFlags, SleepRateFlags, TrainFlags,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dynshare::Error),
    #[error("tolerance breach: {0}")]
    Tolerance(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(dynshare::Error::InvalidArgument(_)) => 2,
            CliError::Core(e) if e.is_divergence() => 3,
            CliError::Tolerance(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dynshare", version, about = "Dynamic weight sharing experiments")]
struct Cli {
    /// Worker threads for sweep cells (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Rerun the run recorded in a manifest.
    #[arg(long, value_name = "MANIFEST")]
    replay: Option<PathBuf>,

    /// With --replay: write into this directory instead of the recorded one.
    #[arg(long, requires = "replay")]
    replay_out: Option<PathBuf>,

    /// With --replay: fail (exit 4) unless every artifact hash matches.
    #[arg(long, requires = "replay")]
    verify: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

macro_rules! with_config {
    ($($name:ident => $flags:ty),* $(,)?) => {
        $(
            #[derive(clap::Args, Debug)]
            struct $name {
                /// key=value file applied before flags.
                #[arg(long)]
                config: Option<PathBuf>,
                #[command(flatten)]
                flags: $flags,
            }
        )*
    };
}

with_config! {
    SleepIdealArgs => SleepIdealFlags,
    SleepRateArgs => SleepRateFlags,
    FixedPointArgs => FixedPointFlags,
    NoiseFloorArgs => NoiseFloorFlags,
    TrainArgs => TrainFlags,
    CompareArgs => CompareFlags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Idealized sleep dynamics sweep over kernel size, decay and seed.
    SleepIdeal(SleepIdealArgs),
    /// Rate-circuit sleep dynamics (ODE or settled discrete update).
    SleepRate(SleepRateArgs),
    /// Iterated dynamics vs closed-form fixed points.
    FixedPoint(FixedPointArgs),
    /// Noisy SGD error trajectories and plateau ratios.
    NoiseFloor(NoiseFloorArgs),
    /// Train one network arm.
    Train(TrainArgs),
    /// Train the conv / LC / reps / ws arm matrix and summarize.
    Compare(CompareArgs),
}

fn config_pairs(path: &Option<PathBuf>) -> Result<Vec<(String, String)>, CliError> {
    match path {
        Some(p) => Ok(dynshare::io::read_key_values(p)?),
        None => Ok(Vec::new()),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(path) = &cli.replay {
        if cli.command.is_some() {
            return Err(CliError::Usage("--replay cannot be combined with a subcommand".into()));
        }
        return manifest::replay(path, cli.replay_out.as_deref(), cli.verify);
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("a subcommand or --replay is required (see --help)".into()));
    };
    match command {
        Command::SleepIdeal(a) => commands::run_sleep_ideal(&config_pairs(&a.config)?, &a.flags),
        Command::SleepRate(a) => commands::run_sleep_rate(&config_pairs(&a.config)?, &a.flags),
        Command::FixedPoint(a) => commands::run_fixed_point(&config_pairs(&a.config)?, &a.flags),
        Command::NoiseFloor(a) => commands::run_noise_floor(&config_pairs(&a.config)?, &a.flags),
        Command::Train(a) => commands::run_train(&config_pairs(&a.config)?, &a.flags),
        Command::Compare(a) => commands::run_compare(&config_pairs(&a.config)?, &a.flags),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(2);
        }
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::Cli;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }
}
