use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Exit status for a command that ran but could not estimate anything.
const EXIT_FAILURE: u8 = 1;
/// Exit status for bad flags or option values.
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cfmap", version, about = "Individual treatment effects by counterfactual mapping")]
struct Cli {
    /// Cap on worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the main JSON result on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// JSON file with default options; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate maps, standard errors and ITEs.
    Estimate(EstimateArgs),
    /// Kernel density of the ITEs, with an optional bootstrap band.
    Density(DensityArgs),
    /// Per-cell diagnostics: propensity gaps, CDF monotonicity, supports, mass points.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo replication of the RMSE table.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct SchemaArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    #[arg(long)]
    instrument: String,
    /// Comma-separated discrete covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

#[derive(Debug, Args, Default)]
struct EstimatorArgs {
    #[arg(long)]
    propensity_tol: Option<f64>,
    /// Monotone rearrangement of the estimated maps.
    #[arg(long)]
    monotonize: bool,
    /// Do not orient the objective by the sign of the propensity difference.
    #[arg(long)]
    no_sign_adjust: bool,
    /// Support override for arm 0, as `lo,hi`.
    #[arg(long, value_parser = config::parse_pair)]
    support0: Option<(f64, f64)>,
    /// Support override for arm 1, as `lo,hi`.
    #[arg(long, value_parser = config::parse_pair)]
    support1: Option<(f64, f64)>,
    #[arg(long)]
    min_cell_size: Option<usize>,
    #[arg(long)]
    min_arm_size: Option<usize>,
    /// Bandwidth of the complier density in standard errors (default: Silverman).
    #[arg(long)]
    kde_bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Directory for ite.csv, map.csv and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DensityArgs {
    /// ITE CSV written by `estimate`.
    #[arg(long, conflicts_with = "input")]
    ite: Option<PathBuf>,
    /// Raw dataset; the pipeline is run first.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    instrument: Option<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// gaussian, epanechnikov or triweight.
    #[arg(long)]
    kernel: Option<String>,
    /// Bandwidth rule: paper_mc or assumption2.
    #[arg(long)]
    rule: Option<String>,
    /// Kernel order used by the assumption2 rule.
    #[arg(long = "P", alias = "order")]
    order: Option<u32>,
    /// Constant multiplying the rule's bandwidth.
    #[arg(long)]
    bandwidth_scale: Option<f64>,
    /// Fixed bandwidth, overriding the rule.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Density domain `lo,hi` (default: min and max of the ITEs).
    #[arg(long, value_parser = config::parse_pair)]
    domain: Option<(f64, f64)>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Evaluate on the whole domain instead of the trimmed interval.
    #[arg(long)]
    no_trim: bool,
    #[arg(long)]
    no_bootstrap: bool,
    /// Bootstrap replicates.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for density.csv and density.meta.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Window (in query points) of the unit-slope scan.
    #[arg(long)]
    slope_window: Option<usize>,
    /// Points per arm in the density overlay (0 disables it).
    #[arg(long)]
    overlay_points: Option<usize>,
    /// Directory for diagnostics.json (and overlay.csv).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// table1 (one design) or table1-full (the 3×3 grid).
    #[arg(long, default_value = "table1")]
    design: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// exponent or alternate.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-individual RMSE CSV (single design only).
    #[arg(long)]
    individual_rmse: Option<PathBuf>,
    /// Also write Monte Carlo density replications to this directory.
    #[arg(long)]
    density_dir: Option<PathBuf>,
    /// Write the base sample (y, d, z) of the first design as CSV.
    #[arg(long)]
    sample_out: Option<PathBuf>,
    /// Level of the Monte Carlo percentile band.
    #[arg(long)]
    level: Option<f64>,
}

/// Bad flags or option values; mapped to exit status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<Usage>().is_some() {
        return (EXIT_USAGE, "usage");
    }
    match err.downcast_ref::<cfmap::Error>() {
        Some(e @ cfmap::Error::InvalidConfig(_)) => (EXIT_USAGE, e.kind()),
        Some(e) => (EXIT_FAILURE, e.kind()),
        None => (EXIT_FAILURE, "failure"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let out = commands::Output { json: cli.json };
    match cli.command {
        Command::Estimate(a) => commands::estimate(a, &file, &out),
        Command::Density(a) => commands::density(a, &file, &out),
        Command::Diagnose(a) => commands::diagnose(a, &file, &out),
        Command::Simulate(a) => commands::simulate(a, &file, &out),
    }
}

fn error_json(kind: &str, message: &str, code: u8) {
    let body = serde_json::json!({
        "error": { "kind": kind, "message": message, "exit_code": code }
    });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            error_json("usage", e.render().to_string().trim_end(), EXIT_USAGE);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            error_json(kind, &format!("{err:#}"), code);
            ExitCode::from(code)
        }
    }
}
