//! `sim`: sampling, RN verification, phase sweeps and accumulation analysis.

mod commands;
mod config;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, DiffeoArg, Format, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input; exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl From<selfsim::Error> for CliError {
    fn from(e: selfsim::Error) -> CliError {
        use selfsim::Error as E;
        match e {
            E::InvalidParameter { .. }
            | E::DimensionMismatch { .. }
            | E::AmplitudeTooLarge { .. }
            | E::BracketNoSignChange { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "sim", version, about = "Self-similar random processes and their quasi-invariance")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample 1-D deviation paths.
    Sample1d(Opts),
    /// Sample matrix-valued chains in dimension d >= 2.
    Sampledd(Opts),
    /// Sample Poisson configurations in a window.
    Poisson(Opts),
    /// Truncated RN product and convergence verdict for one path.
    Rncheck(Opts),
    /// Monte Carlo check of the unitarity identity.
    Unitarity(Opts),
    /// Estimate the critical scale kappa0.
    Kappa0(Opts),
    /// Phase diagram over a kappa grid.
    Sweep(Opts),
    /// Accumulation points of a path.
    Accpoints(Opts),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct Opts {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    max_replicas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `identity`, `bump:c..,R,a[,e..]` or JSON; repeat to compose.
    #[arg(long)]
    diffeo: Vec<String>,
    /// Output path (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// lo..,hi.. as comma-separated numbers.
    #[arg(long, value_delimiter = ',')]
    window: Option<Vec<f64>>,
    /// lo..,hi.. as comma-separated numbers.
    #[arg(long, value_delimiter = ',')]
    region: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    tail_fraction: Option<f64>,
    #[arg(long)]
    gap_tol: Option<f64>,
    #[arg(long)]
    overflow: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    bracket: Option<Vec<f64>>,
    /// Bump term c..,R,w; repeat to add terms.
    #[arg(long)]
    phase_fn: Vec<String>,
    /// Bump term c..,R,w; repeat to add terms.
    #[arg(long)]
    weight_fn: Vec<String>,
    /// JSON or JSONL file holding a path (`x`) or configuration (`points`).
    #[arg(long)]
    input: Option<PathBuf>,
}

impl Opts {
    fn into_config(self) -> (Option<PathBuf>, RunConfig) {
        let nonempty = |v: Vec<String>| if v.is_empty() { None } else { Some(v) };
        let cfg = RunConfig {
            command: None,
            dim: self.dim,
            kappa: self.kappa,
            alpha: self.alpha,
            steps: self.steps,
            replicas: self.replicas,
            max_replicas: self.max_replicas,
            seed: self.seed,
            diffeo: nonempty(self.diffeo).map(|v| v.into_iter().map(DiffeoArg::Text).collect()),
            out: self.out,
            format: self.format,
            tol: self.tol,
            sigma: self.sigma,
            window: self.window,
            region: self.region,
            k: self.k,
            grid: self.grid,
            epsilon: self.epsilon,
            m: self.m,
            tail_fraction: self.tail_fraction,
            gap_tol: self.gap_tol,
            overflow: self.overflow,
            bracket: self.bracket,
            phase_fn: nonempty(self.phase_fn),
            weight_fn: nonempty(self.weight_fn),
            input: self.input,
        };
        (self.config, cfg)
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SIM_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("SIM_THREADS must be a positive integer (got {v:?})")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (command, opts) = match cli.command {
        Cmd::Sample1d(o) => (Command::Sample1d, o),
        Cmd::Sampledd(o) => (Command::Sampledd, o),
        Cmd::Poisson(o) => (Command::Poisson, o),
        Cmd::Rncheck(o) => (Command::Rncheck, o),
        Cmd::Unitarity(o) => (Command::Unitarity, o),
        Cmd::Kappa0(o) => (Command::Kappa0, o),
        Cmd::Sweep(o) => (Command::Sweep, o),
        Cmd::Accpoints(o) => (Command::Accpoints, o),
    };
    let (file, flags) = opts.into_config();
    let cfg = match file {
        Some(path) => flags.over(RunConfig::from_file(&path)?),
        None => flags,
    }
    .resolve(command)?;
    let text = commands::run(command, &cfg)?;
    match &cfg.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Runtime(format!("cannot write stdout: {e}")))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
