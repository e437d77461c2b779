mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{BandwidthArg, IndexArg};

#[derive(Parser, Debug)]
#[command(name = "panelqr", version, about = "Panel quantile regression with latent groups")]
struct Cli {
    /// Flat key=value file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: PANELQR_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full estimation: grouping, post-grouping fits and intervals.
    Estimate(DataArgs),
    /// Preliminary fits, distance matrix, group number and membership only.
    GroupOnly(DataArgs),
    /// Monte-Carlo study on a built-in design.
    Simulate(SimArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Column mapping, e.g. `y=ret,x=a;b,z=vix,id=firm,t=month`.
    #[arg(long)]
    pub schema: Option<String>,
    /// One level or a comma-separated list (one subdirectory per level).
    #[arg(long)]
    pub tau: Option<String>,
    /// `gaussian` or `epanechnikov`.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Preliminary bandwidth: `cv` or a value.
    #[arg(long)]
    pub bandwidth: Option<BandwidthArg>,
    /// Post-grouping bandwidth: `cv` (pooled) or a value.
    #[arg(long)]
    pub post_bandwidth: Option<BandwidthArg>,
    /// One cross-validated preliminary bandwidth for all subjects.
    #[arg(long)]
    pub common_bandwidth: bool,
    /// Cross-validation folds (default min(T, 20)).
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub rmax: Option<usize>,
    /// `nn:<factor>`, `rel:<factor>` or `abs:<value>`.
    #[arg(long)]
    pub omega: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Skip confidence intervals.
    #[arg(long)]
    pub no_ci: bool,
    /// Jackknife bias correction for the intervals.
    #[arg(long)]
    pub jackknife: bool,
    /// Recorded in the manifest; estimation itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Smoothing index: the `z` column or scaled time `t/T`.
    #[arg(long)]
    pub index: Option<IndexArg>,
    /// Extra uniform points added to the fitted curves.
    #[arg(long)]
    pub plot_grid: Option<usize>,
    /// Group linear quantile regressions uniformly over a range of levels.
    #[arg(long)]
    pub uniform_tau: bool,
    /// Levels for `--uniform-tau` (default 19 points on [0.05, 0.95]).
    #[arg(long)]
    pub tau_grid: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    /// `dgp1` or `dgp2`.
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    /// One level or a comma-separated list.
    #[arg(long)]
    pub tau: Option<String>,
    /// `normal`, `t5` or `chi2`.
    #[arg(long)]
    pub errors: Option<String>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rmax: Option<usize>,
    #[arg(long)]
    pub omega: Option<String>,
    #[arg(long)]
    pub kernel: Option<String>,
    /// Cross-validate over 9 candidates instead of 5.
    #[arg(long)]
    pub full_grid: bool,
    /// Select preliminary and post-grouping bandwidths separately, as
    /// `estimate` does, instead of once per replication.
    #[arg(long)]
    pub per_stage_cv: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Problems with the invocation itself (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn configure_threads(flag: Option<usize>, cfg: &config::ConfigFile) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match cfg.get::<usize>("threads")? {
            Some(n) => Some(n),
            None => match std::env::var("PANELQR_THREADS") {
                Ok(v) => Some(v.trim().parse().map_err(|_| usage(format!("PANELQR_THREADS=`{v}` is not a count")))?),
                Err(_) => None,
            },
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn report(err: &anyhow::Error) -> serde_json::Value {
    let (kind, detail) = match err.downcast_ref::<panelqr::Error>() {
        Some(e) => (e.kind(), e.to_string()),
        None if err.downcast_ref::<UsageError>().is_some() => ("usage", err.to_string()),
        None => ("runtime", format!("{err:#}")),
    };
    serde_json::json!({ "error": { "kind": kind, "message": detail } })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => config::ConfigFile::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => config::ConfigFile::default(),
    };
    configure_threads(cli.threads, &cfg)?;
    match cli.command {
        Command::Estimate(a) => commands::estimate(&a, &cfg, true),
        Command::GroupOnly(a) => commands::estimate(&a, &cfg, false),
        Command::Simulate(a) => commands::simulate(&a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", report(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
