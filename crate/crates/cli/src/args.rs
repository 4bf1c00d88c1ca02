use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;

use sace_core::data::{load_dataset, nsw, Dataset, Role, Schema};
use sace_core::sensitivity::parameter_range;

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with treatment, survival, outcome and covariate columns.
    #[arg(long, required_unless_present = "nsw")]
    pub data: Option<PathBuf>,
    /// Column-role configuration (JSON).
    #[arg(long, requires = "data")]
    pub roles: Option<PathBuf>,
    /// Use the bundled NSW example instead of --data/--roles.
    #[arg(long, conflicts_with_all = ["data", "roles"])]
    pub nsw: bool,
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        if self.nsw {
            return Ok(nsw::dataset());
        }
        let data = self.data.as_ref().expect("clap enforces --data");
        let roles = self.roles.as_ref().context("--roles is required with --data")?;
        let schema = Schema::from_json_file(roles).with_context(|| format!("reading roles file {}", roles.display()))?;
        load_dataset(data, &schema).with_context(|| format!("loading {}", data.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceArg {
    Mahalanobis,
    MahalanobisCaliper,
    PiTilde,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmArg {
    Greedy,
    Optimal,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    #[arg(long, value_enum, default_value = "mahalanobis-caliper")]
    pub distance: DistanceArg,
    /// Distance covariates; defaults to the columns with the `distance` role.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    /// Caliper on the score, in SDs over all survivors.
    #[arg(long, conflicts_with = "caliper")]
    pub caliper_sd: Option<f64>,
    /// Caliper on the score, in score units.
    #[arg(long)]
    pub caliper: Option<f64>,
    /// Match with replacement.
    #[arg(long)]
    pub replace: bool,
    /// Algorithm without replacement (ignored with --replace).
    #[arg(long, value_enum, default_value = "optimal")]
    pub algorithm: AlgorithmArg,
    /// Principal score model JSON from `sace em`; fitted under monotonicity if absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl MatchArgs {
    pub fn columns(&self, d: &Dataset) -> Vec<String> {
        if self.columns.is_empty() {
            d.feature_names(&d.role_features(Role::Distance))
        } else {
            self.columns.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    Crude,
    Wls,
    WlsI,
    Bc,
    Naive,
    Composite,
    Weighting,
}

impl EstimatorArg {
    pub fn needs_matching(self) -> bool {
        matches!(self, EstimatorArg::Crude | EstimatorArg::Wls | EstimatorArg::WlsI | EstimatorArg::Bc)
    }
}

/// `lo:hi:step`, a comma list, or a single value.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Grid(pub Vec<f64>);

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: `{t}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [lo, hi, step] => parameter_range(num(lo)?, num(hi)?, num(step)?)
                .map(Grid)
                .map_err(|e| e.to_string()),
            [one] => one.split(',').map(num).collect::<std::result::Result<_, _>>().map(Grid),
            _ => Err(format!("expected lo:hi:step or a comma list, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ScenarioArg {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiProArg {
    High,
    Low,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SensitivityMode {
    /// Departures from partial principal ignorability (alpha1).
    Ppi {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        matching: MatchArgs,
        #[arg(long, default_value = "0.5:2:0.1")]
        alpha1: Grid,
        /// Use the outcome model with treatment-covariate interactions.
        #[arg(long)]
        interactions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Departures from monotonicity (xi, alpha0).
    Mono {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        matching: MatchArgs,
        /// Defaults to 0, 0.1, ... up to the identified upper bound.
        #[arg(long)]
        xi: Option<Grid>,
        #[arg(long, default_value = "0.5:2:0.25")]
        alpha0: Grid,
        #[arg(long)]
        interactions: bool,
        /// Refit the score model, rematch and refit the outcome model at each xi.
        #[arg(long)]
        refit: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn require_seed(seed: Option<u64>, why: &str) -> Result<u64> {
    match seed {
        Some(s) => Ok(s),
        None => bail!("--seed is required {why}"),
    }
}
