mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use args::{DataArgs, DistanceArg, EstimatorArg, MatchArgs, PiProArg, ScenarioArg, SensitivityMode};

/// Survivor average causal effects by principal score matching.
#[derive(Debug, Parser)]
#[command(name = "sace", version)]
struct Cli {
    /// Worker threads for grid sweeps and simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub(crate) enum Command {
    /// Fit the principal score model by EM.
    Em {
        #[command(flatten)]
        data: DataArgs,
        /// Fit under the relaxed assumption with this harmed-to-always-survivor ratio.
        #[arg(long)]
        xi: Option<f64>,
        /// Extra randomly perturbed starts (requires --seed).
        #[arg(long, default_value_t = 0)]
        starts: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Model JSON.
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Match untreated survivors to treated survivors.
    Match {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        matching: MatchArgs,
        /// Matched pairs CSV.
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Covariate balance before and after matching.
    Balance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        matching: MatchArgs,
        /// Balance table CSV; the unmatched table goes to `<out>.raw.csv`.
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Point estimates and 95% intervals.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        matching: MatchArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [EstimatorArg::Crude, EstimatorArg::Wls, EstimatorArg::WlsI, EstimatorArg::Bc])]
        estimators: Vec<EstimatorArg>,
        /// Also write the matched balance table here.
        #[arg(long)]
        balance: Option<std::path::PathBuf>,
        /// Also run the Wilcoxon and aligned-rank tests and write them here (JSON).
        #[arg(long)]
        rank_tests: Option<std::path::PathBuf>,
        #[arg(long, default_value_t = 500)]
        n_boot: usize,
        #[arg(long, default_value_t = 10_000)]
        n_perm: usize,
        /// Required for weighting and rank tests.
        #[arg(long)]
        seed: Option<u64>,
        /// Estimates CSV, or JSON when the path ends in `.json`.
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Sensitivity sweeps.
    Sensitivity {
        #[command(subcommand)]
        mode: SensitivityMode,
    },
    /// Monte Carlo study on a registered scenario.
    Simulate {
        #[arg(long, value_enum, default_value = "a")]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value = "high")]
        pi_pro: PiProArg,
        /// Outcome model with treatment-covariate interactions.
        #[arg(long)]
        interactions: bool,
        /// Generate strata from the misspecified score model.
        #[arg(long)]
        misspecified: bool,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [EstimatorArg::Crude, EstimatorArg::Wls, EstimatorArg::WlsI, EstimatorArg::Bc])]
        estimators: Vec<EstimatorArg>,
        #[arg(long, value_enum, default_value = "mahalanobis-caliper")]
        distance: DistanceArg,
        #[arg(long, default_value_t = 0.25)]
        caliper_sd: f64,
        /// Match without replacement (optimal).
        #[arg(long)]
        no_replace: bool,
        /// Summary CSV.
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let body = serde_json::json!({ "error": e.to_string(), "causes": &chain[1..] });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    commands::dispatch(&cli.command, cli.threads)
}
