//! `qsa`: run two-timescale QSA experiments from a JSON configuration.
//!
//! Exit status: 0 on success, 2 when the configuration violates an
//! assumption, 3 when a state became non-finite, 4 when an acceptance band
//! failed, 1 for any other runtime error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qsa_core::QsaError;

use crate::commands::Verdict;
use crate::config::{resolve, Config};

#[derive(Debug, Parser)]
#[command(name = "qsa", version, about = "Two-timescale quasi-stochastic approximation experiments")]
struct Cli {
    /// JSON configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Assert that the build links no random number generator.
    #[arg(long, global = true)]
    seedless: bool,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Integrate one trajectory.
    Simulate,
    /// Fast-error sweep over beta with a log-log fit.
    SweepFast {
        /// Apply the second-order filter to the fast state.
        #[arg(long)]
        filtered: bool,
    },
    /// Slow error against the slow gain, at T and 2T.
    CheckSlow,
    /// Bias of the effective root against beta.
    Bias,
    /// Mean-flow identity residuals along a trajectory.
    Pmf,
    /// Frozen fast Lyapunov exponents over a grid of slow states.
    Lyapunov,
    /// Fast equilibrium or effective slow field over a grid.
    MeanflowGrid,
    /// Run extremum seeking control.
    Esc,
}

impl Command {
    fn dir_name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SweepFast { filtered: false } => "sweep-fast",
            Command::SweepFast { filtered: true } => "sweep-fast-filtered",
            Command::CheckSlow => "check-slow",
            Command::Bias => "bias",
            Command::Pmf => "pmf",
            Command::Lyapunov => "lyapunov",
            Command::MeanflowGrid => "meanflow-grid",
            Command::Esc => "esc",
        }
    }
}

/// The build links no RNG crate; this is checked by a test over the
/// dependency graph, so the flag only records the assertion.
const LINKS_RNG: bool = false;

enum Failure {
    Config(String),
    Core(QsaError),
    Band(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Band(_) => 4,
            Failure::Core(e) => match e.root() {
                QsaError::NonFinite { .. } => 3,
                QsaError::InvalidPair { .. }
                | QsaError::DuplicateFrequency { .. }
                | QsaError::InvalidFrequencyIndex { .. }
                | QsaError::ZeroDivisor { .. }
                | QsaError::NotZeroMean
                | QsaError::Dimension(_)
                | QsaError::InvalidInput(_)
                | QsaError::NonHurwitz { .. }
                | QsaError::NegativeObjective { .. }
                | QsaError::Unsupported(_)
                | QsaError::Expr(_) => 2,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) | Failure::Band(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

impl From<QsaError> for Failure {
    fn from(e: QsaError) -> Self {
        Failure::Core(e)
    }
}

fn load(path: Option<&Path>) -> Result<Config, Failure> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<PathBuf, Failure> {
    if cli.seedless && LINKS_RNG {
        return Err(Failure::Config("--seedless: this build links a random number generator".into()));
    }
    let mut config = load(cli.config.as_deref())?;
    if let Command::SweepFast { filtered: true } = cli.command {
        config.filter.enabled = true;
    }
    let resolved = resolve(config)?;
    let dir = cli.out.join(cli.command.dir_name());
    std::fs::create_dir_all(&dir).map_err(QsaError::from)?;
    let text = serde_json::to_string_pretty(&resolved.config).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::write(dir.join("config.resolved.json"), text + "\n").map_err(QsaError::from)?;
    log::info!("running {} on {} into {}", cli.command.dir_name(), resolved.system.name(), dir.display());

    let verdict = match cli.command {
        Command::Simulate => commands::simulate(&resolved, &dir)?,
        Command::SweepFast { .. } => commands::sweep_fast(&resolved, &dir)?,
        Command::CheckSlow => commands::check_slow(&resolved, &dir)?,
        Command::Bias => commands::bias(&resolved, &dir)?,
        Command::Pmf => commands::pmf(&resolved, &dir)?,
        Command::Lyapunov => commands::lyapunov(&resolved, &dir)?,
        Command::MeanflowGrid => commands::meanflow_grid(&resolved, &dir)?,
        Command::Esc => commands::esc(&resolved, &dir)?,
    };
    match verdict {
        Verdict::Pass => Ok(dir),
        Verdict::Fail(m) => Err(Failure::Band(m)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
