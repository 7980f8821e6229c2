//! `locrate`: batch front-end for location-based rate selection runs.

mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::{MapKind, Run};
use config::{Overrides, RunConfig};
use error::{CliError, CliResult};
use locrate::profile::Profile;
use locrate::rateselect::SchemeFamily;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "locrate",
    version,
    about = "Location-based rate selection experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; absent sections take profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $LOCRATE_OUT/<command> or locrate-out/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Parameter profile used for defaults.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Backoff,
    Interval,
    Distance,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an environment container.
    GenEnv,
    /// Compute a capacity or PEB map from an environment container.
    Maps {
        /// Environment container.
        #[arg(long)]
        env: PathBuf,
        #[arg(long, value_enum)]
        which: MapKind,
    },
    /// Calibrate a rate-selection scheme and evaluate it on every in-cell point.
    CalibrateEval {
        /// Environment container.
        #[arg(long)]
        env: PathBuf,
        /// Precomputed capacity CSV; computed from the container when absent.
        #[arg(long)]
        capacity: Option<PathBuf>,
        /// Scheme family, overriding the config.
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        /// Meta-probability target, overriding the config.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Tables of the one-dimensional Rayleigh scenario.
    Rayleigh,
    /// Coherence radius, extrema and grouped statistics of a capacity map.
    Analyze {
        /// Environment container.
        #[arg(long)]
        env: PathBuf,
        /// Capacity CSV.
        #[arg(long)]
        capacity: PathBuf,
        /// Report CSVs to group by peaks and valleys.
        #[arg(long = "report")]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenEnv => "gen-env",
            Command::Maps { .. } => "maps",
            Command::CalibrateEval { .. } => "calibrate-eval",
            Command::Rayleigh => "rayleigh",
            Command::Analyze { .. } => "analyze",
        }
    }
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let (family, delta) = match &cli.command {
        Command::CalibrateEval { family, delta, .. } => (*family, *delta),
        _ => (None, None),
    };
    let overrides = Overrides {
        profile: c.profile.map(|p| match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }),
        seed: c.seed,
        output_dir: c.out.clone(),
        family: family.map(|f| match f {
            FamilyArg::Backoff => SchemeFamily::Backoff,
            FamilyArg::Interval => SchemeFamily::Interval,
            FamilyArg::Distance => SchemeFamily::Distance,
        }),
        delta,
    };
    let name = cli.command.name();
    let cfg = RunConfig::load(c.config.as_deref(), &overrides, name)?;
    let run = Run::start(name, cfg, c.threads)?;
    match &cli.command {
        Command::GenEnv => commands::gen_env(run),
        Command::Maps { env, which } => commands::maps(run, env, *which),
        Command::CalibrateEval { env, capacity, .. } => {
            commands::calibrate_eval(run, env, capacity.as_deref())
        }
        Command::Rayleigh => commands::rayleigh(run),
        Command::Analyze {
            env,
            capacity,
            reports,
        } => commands::analyze(run, env, capacity, reports),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
