use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "rbf-solver",
    version,
    about = "Gaussian-RBF multistep samplers for diffusion ODEs"
)]
pub struct Cli {
    /// JSON file with default values for any flag; flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random draw
    #[arg(long, global = true, env = "RBF_SOLVER_SEED")]
    pub seed: Option<u64>,

    /// Worker threads for parallel sections
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump coefficient vectors as CSV
    Coeffs(CoeffsArgs),
    /// Run the sampler on a test problem
    Sample(SampleArgs),
    /// Convergence study as CSV
    Converge(ConvergeArgs),
    /// Grid-search the shape parameters
    Optimize(OptimizeArgs),
    /// Run the invariant suite
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Default)]
pub struct ScheduleArgs {
    /// vp-linear, vp-cosine or a `t,lambda` CSV path
    #[arg(long)]
    pub schedule: Option<String>,

    /// uniform-lambda or uniform-t
    #[arg(long)]
    pub spacing: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct SolverArgs {
    /// rbf, adams, equal or euler
    #[arg(long)]
    pub method: Option<String>,

    /// Order
    #[arg(long)]
    pub p: Option<usize>,

    /// Uniform log gamma for the rbf method
    #[arg(long, allow_hyphen_values = true)]
    pub log_gamma: Option<f64>,

    /// Shape schedule JSON for the rbf method
    #[arg(long)]
    pub shape: Option<PathBuf>,

    /// Skip the corrector
    #[arg(long)]
    pub no_corrector: bool,

    /// Use the no-constant ablation basis
    #[arg(long)]
    pub no_constant: bool,
}

#[derive(Debug, Args)]
pub struct CoeffsArgs {
    /// Comma-separated decreasing nodes
    #[arg(long, allow_hyphen_values = true)]
    pub nodes: Option<String>,

    /// Grid step used with --p when --nodes is absent
    #[arg(long)]
    pub step: Option<f64>,

    /// Number of nodes used with --step
    #[arg(long)]
    pub p: Option<usize>,

    /// `lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    pub interval: Option<String>,

    /// rbf, adams, equal, euler or unipc
    #[arg(long)]
    pub method: Option<String>,

    /// A value or a sweep `a..b:n`
    #[arg(long, allow_hyphen_values = true)]
    pub log_gamma: Option<String>,

    /// Use the no-constant ablation basis
    #[arg(long)]
    pub no_constant: bool,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub problem: Option<String>,

    /// Number of steps
    #[arg(long = "m", short = 'M')]
    pub m: Option<usize>,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[command(flatten)]
    pub schedule: ScheduleArgs,

    /// JSON-lines trace output
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    #[arg(long)]
    pub problem: Option<String>,

    /// Comma-separated increasing step counts
    #[arg(long)]
    pub m_list: Option<String>,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[command(flatten)]
    pub schedule: ScheduleArgs,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub problem: Option<String>,

    /// Order
    #[arg(long)]
    pub p: Option<usize>,

    /// Number of steps
    #[arg(long = "m", short = 'M')]
    pub m: Option<usize>,

    /// split-joint, split-independent or shared
    #[arg(long)]
    pub mode: Option<String>,

    /// Grid points per axis
    #[arg(long)]
    pub resolution: Option<usize>,

    /// `lo,hi` in log gamma
    #[arg(long, allow_hyphen_values = true)]
    pub range: Option<String>,

    /// Target pairs
    #[arg(long)]
    pub batch: Option<usize>,

    /// Steps of the reference run that builds targets
    #[arg(long)]
    pub reference_nfe: Option<usize>,

    /// Drop the Adams marker from the candidates
    #[arg(long)]
    pub no_adams_candidate: bool,

    #[command(flatten)]
    pub schedule: ScheduleArgs,

    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Restrict to one module
    #[arg(long)]
    pub only: Option<String>,

    /// Write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Values accepted from `--config`. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub problem: Option<String>,
    pub method: Option<String>,
    pub p: Option<usize>,
    pub m: Option<usize>,
    pub m_list: Option<Vec<usize>>,
    pub log_gamma: Option<serde_json::Value>,
    pub shape: Option<PathBuf>,
    pub corrector: Option<bool>,
    pub constant: Option<bool>,
    pub schedule: Option<String>,
    pub spacing: Option<String>,
    pub nodes: Option<Vec<f64>>,
    pub step: Option<f64>,
    pub interval: Option<[f64; 2]>,
    pub trace: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub mode: Option<String>,
    pub resolution: Option<usize>,
    pub range: Option<[f64; 2]>,
    pub batch: Option<usize>,
    pub reference_nfe: Option<usize>,
    pub adams_candidate: Option<bool>,
    pub only: Option<String>,
    pub json: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("malformed {what} `{s}`")))
        })
        .collect()
}

pub fn parse_pair(s: &str, what: &str) -> Result<[f64; 2], CliError> {
    match parse_list::<f64>(s, what)?.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(CliError::Usage(format!(
            "{what} needs exactly two values, got `{s}`"
        ))),
    }
}

/// `x` or `a..b:n` into the list of log-gamma values.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("malformed log gamma `{s}`; use a value or a..b:n"));
    let Some((range, n)) = s.split_once(':') else {
        return Ok(vec![s.trim().parse().map_err(|_| bad())?]);
    };
    let (a, b) = range.split_once("..").ok_or_else(bad)?;
    let (a, b): (f64, f64) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n < 2 || !(a < b) {
        return Err(bad());
    }
    Ok((0..n)
        .map(|k| {
            if k + 1 == n {
                b
            } else {
                a + (b - a) * k as f64 / (n - 1) as f64
            }
        })
        .collect())
}
