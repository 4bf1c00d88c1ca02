//! Synthetic trials with truncation by death, and a Monte Carlo runner for
//! the estimators.
//!
//! Units draw `X0 ~ N(0.5, I_k)` and a principal stratum from a three-category
//! logit (protected as reference). Always-survivors get both potential
//! outcomes with errors correlated 0.4, protected units only `Y(1)`, and
//! never-survivors none. Treatment is a fair coin.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnMeta, Dataset, Role, Schema, UnitRecord};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_bias_corrected, estimate_composite, estimate_crude, estimate_naive, estimate_regression, fit_arm_regression,
    fit_outcome_model, weighting_point, EstimateReport, EstimatorTag,
};
use crate::linalg::{mean, variance};
use crate::matching::{match_with_metric, Algorithm, Caliper, DistanceKind, DistanceMetric, DistanceSpec, TargetGroup};
use crate::multinomial::softmax;
use crate::principal_score::{fit_em_monotonicity, principal_score_features, EmOptions, PrincipalScoreModel};
use crate::rng::par_map;

pub const ERROR_CORRELATION: f64 = 0.4;
const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiProLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSet {
    pub g0_as: f64,
    pub c_as: f64,
    pub g0_ns: f64,
    pub c_ns: f64,
}

/// Coefficients of the squared and log terms added under misspecification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisspecifiedTerms {
    pub sq_as: f64,
    pub log_as: f64,
    pub sq_ns: f64,
    pub log_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSet {
    pub b0_1: f64,
    pub beta_1: Vec<f64>,
    pub b0_0: f64,
    pub beta_0: Vec<f64>,
}

impl BetaSet {
    pub fn has_interactions(&self) -> bool {
        self.beta_1 != self.beta_0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub k: usize,
    pub scenario: Option<Scenario>,
    pub pi_pro_level: Option<PiProLevel>,
    pub gamma: GammaSet,
    /// Present when the true score model carries the extra terms.
    pub misspecification: Option<MisspecifiedTerms>,
    pub beta: BetaSet,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.beta.beta_0.len() != self.k || self.beta.beta_1.len() != self.k {
            return Err(Error::invalid(format!(
                "k = {} does not match the outcome slopes ({}, {})",
                self.k,
                self.beta.beta_0.len(),
                self.beta.beta_1.len()
            )));
        }
        if self.misspecification.is_some() && self.k < 2 {
            return Err(Error::invalid("misspecified score models need k >= 2"));
        }
        let g = &self.gamma;
        let all = [g.g0_as, g.c_as, g.g0_ns, g.c_ns, self.beta.b0_0, self.beta.b0_1];
        if all.iter().chain(&self.beta.beta_0).chain(&self.beta.beta_1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coefficient"));
        }
        Ok(())
    }

    pub fn outcome_interactions(&self) -> bool {
        self.beta.has_interactions()
    }

    /// Linear predictors `(eta_as, eta_ns)` of the true score model.
    pub fn linear_predictors(&self, x: &[f64]) -> (f64, f64) {
        let s: f64 = x.iter().sum();
        let g = &self.gamma;
        let (mut eas, mut ens) = (g.g0_as + g.c_as * s, g.g0_ns + g.c_ns * s);
        if let Some(m) = &self.misspecification {
            let [sq, lg] = misspecify_ps(x);
            eas += m.sq_as * sq + m.log_as * lg;
            ens += m.sq_ns * sq + m.log_ns * lg;
        }
        (eas, ens)
    }

    /// True `(pi_as, pi_pro, pi_ns)` at `x`.
    pub fn strata_probs(&self, x: &[f64]) -> [f64; 3] {
        let (eas, ens) = self.linear_predictors(x);
        let p = softmax(&[0.0, eas, ens]);
        [p[1], p[0], p[2]]
    }

    pub fn mean_outcome(&self, a: u8, x: &[f64]) -> f64 {
        let (b0, b) = if a == 1 {
            (self.beta.b0_1, &self.beta.beta_1)
        } else {
            (self.beta.b0_0, &self.beta.beta_0)
        };
        b0 + b.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Extra score-model terms: the square of covariate 1 and the log of the
/// absolute value of covariate 2, floored away from zero.
pub fn misspecify_ps(x0: &[f64]) -> [f64; 2] {
    [x0[0] * x0[0], x0[1].abs().max(LOG_FLOOR).ln()]
}

#[derive(Debug, Clone, Deserialize)]
struct GammaEntry {
    scenario: Scenario,
    pi_pro: PiProLevel,
    k: usize,
    correct: GammaSet,
    misspecified: MisspecifiedTerms,
}

#[derive(Debug, Clone, Deserialize)]
struct BetaEntry {
    interactions: bool,
    k: usize,
    b0_1: f64,
    beta_1: Vec<f64>,
    b0_0: f64,
    beta_0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct Registry {
    gamma: Vec<GammaEntry>,
    beta: Vec<BetaEntry>,
}

pub const REGISTRY_JSON: &str = include_str!("../data/scenarios.json");

/// Scenario from the bundled coefficient registry. `n = 2000`, `reps = 200`.
pub fn registered_scenario(
    scenario: Scenario,
    level: PiProLevel,
    k: usize,
    misspecified: bool,
    interactions: bool,
) -> Result<ScenarioConfig> {
    let reg: Registry = serde_json::from_str(REGISTRY_JSON)?;
    let g = reg
        .gamma
        .iter()
        .find(|e| e.scenario == scenario && e.pi_pro == level && e.k == k)
        .ok_or_else(|| Error::invalid(format!("no registered score coefficients for k = {k}")))?;
    let b = reg
        .beta
        .iter()
        .find(|e| e.interactions == interactions && e.k == k)
        .ok_or_else(|| Error::invalid(format!("no registered outcome coefficients for k = {k}")))?;
    Ok(ScenarioConfig {
        k,
        scenario: Some(scenario),
        pi_pro_level: Some(level),
        gamma: g.correct,
        misspecification: misspecified.then_some(g.misspecified),
        beta: BetaSet {
            b0_1: b.b0_1,
            beta_1: b.beta_1.clone(),
            b0_0: b.b0_0,
            beta_0: b.beta_0.clone(),
        },
        n: 2000,
        reps: 200,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    As,
    Pro,
    Ns,
}

/// Latent quantities of a generated dataset, indexed like its units.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    strata: Vec<Stratum>,
    y0: Vec<Option<f64>>,
    y1: Vec<Option<f64>>,
    eps: Vec<Option<(f64, f64)>>,
}

impl TruthRecord {
    pub fn stratum(&self, i: usize) -> Stratum {
        self.strata[i]
    }

    pub fn s0(&self, i: usize) -> bool {
        self.strata[i] == Stratum::As
    }

    pub fn s1(&self, i: usize) -> bool {
        self.strata[i] != Stratum::Ns
    }

    pub fn y0(&self, i: usize) -> Option<f64> {
        self.y0[i]
    }

    pub fn y1(&self, i: usize) -> Option<f64> {
        self.y1[i]
    }

    /// Outcome errors `(eps0, eps1)` of an always-survivor.
    pub fn errors(&self, i: usize) -> Option<(f64, f64)> {
        self.eps[i]
    }

    pub fn strata_proportions(&self) -> [f64; 3] {
        let n = self.strata.len() as f64;
        let c = |s| self.strata.iter().filter(|&&t| t == s).count() as f64 / n;
        [c(Stratum::As), c(Stratum::Pro), c(Stratum::Ns)]
    }

    /// Mean of `Y(1) - Y(0)` over the always-survivors.
    pub fn sample_sace(&self) -> f64 {
        let d: Vec<f64> = (0..self.strata.len())
            .filter(|&i| self.strata[i] == Stratum::As)
            .map(|i| self.y1[i].unwrap() - self.y0[i].unwrap())
            .collect();
        mean(&d)
    }
}

pub struct Simulated {
    pub data: Dataset,
    pub truth: TruthRecord,
}

pub fn simulation_schema(k: usize) -> Schema {
    Schema {
        id: Some("id".into()),
        treatment: "a".into(),
        survival: "s".into(),
        outcome: "y".into(),
        columns: (1..=k)
            .map(|j| ColumnMeta {
                name: format!("x{j}"),
                kind: ColumnKind::Continuous,
                roles: vec![Role::Distance, Role::PrincipalScore, Role::OutcomeModel, Role::Balance],
            })
            .collect(),
    }
}

fn draw_stratum(rng: &mut ChaCha8Rng, p: [f64; 3]) -> Stratum {
    let u: f64 = rng.random();
    if u < p[0] {
        Stratum::As
    } else if u < p[0] + p[1] {
        Stratum::Pro
    } else {
        Stratum::Ns
    }
}

fn draw_x(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<Simulated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = ERROR_CORRELATION;
    let mut units = Vec::with_capacity(cfg.n);
    let mut truth = TruthRecord {
        strata: Vec::with_capacity(cfg.n),
        y0: Vec::with_capacity(cfg.n),
        y1: Vec::with_capacity(cfg.n),
        eps: Vec::with_capacity(cfg.n),
    };
    for i in 0..cfg.n {
        let x = draw_x(&mut rng, cfg.k);
        let p = cfg.strata_probs(&x);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "stratum probabilities off the simplex");
        let g = draw_stratum(&mut rng, p);
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let (e0, e1) = (z0, rho * z0 + (1.0 - rho * rho).sqrt() * z1);
        let (y0, y1, eps) = match g {
            Stratum::As => (Some(cfg.mean_outcome(0, &x) + e0), Some(cfg.mean_outcome(1, &x) + e1), Some((e0, e1))),
            Stratum::Pro => (None, Some(cfg.mean_outcome(1, &x) + e1), None),
            Stratum::Ns => (None, None, None),
        };
        let treated = rng.random_bool(0.5);
        let y = if treated { y1 } else { y0 };
        units.push(UnitRecord {
            id: i as u64,
            x0: x,
            x1: vec![],
            treated,
            survived: y.is_some(),
            y,
        });
        truth.strata.push(g);
        truth.y0.push(y0);
        truth.y1.push(y1);
        truth.eps.push(eps);
    }
    Ok(Simulated {
        data: Dataset::new(units, simulation_schema(cfg.k))?,
        truth,
    })
}

/// True SACE. Exact when the arms share slopes; otherwise the
/// `pi_as`-weighted average of the conditional contrast over `oracle_n`
/// covariate draws.
pub fn true_sace(cfg: &ScenarioConfig, oracle_n: usize, seed: u64) -> f64 {
    if !cfg.outcome_interactions() {
        return cfg.beta.b0_1 - cfg.beta.b0_0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..oracle_n {
        let x = draw_x(&mut rng, cfg.k);
        let w = cfg.strata_probs(&x)[0];
        num += w * (cfg.mean_outcome(1, &x) - cfg.mean_outcome(0, &x));
        den += w;
    }
    num / den
}

pub const ORACLE_N: usize = 1_000_000;

/// Seed of replicate `r`: a SplitMix64 mix of the master seed and `r`.
pub fn replicate_seed(master: u64, r: u64) -> u64 {
    let mut z = master ^ r.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEstimator {
    Crude,
    Regression,
    RegressionInteractions,
    BiasCorrected,
    Naive,
    Composite,
    Weighting,
}

impl SimEstimator {
    pub const ALL: [SimEstimator; 7] = [
        SimEstimator::Crude,
        SimEstimator::Regression,
        SimEstimator::RegressionInteractions,
        SimEstimator::BiasCorrected,
        SimEstimator::Naive,
        SimEstimator::Composite,
        SimEstimator::Weighting,
    ];

    pub fn tag(&self) -> EstimatorTag {
        match self {
            SimEstimator::Crude => EstimatorTag::Crude,
            SimEstimator::Regression => EstimatorTag::Regression,
            SimEstimator::RegressionInteractions => EstimatorTag::RegressionInteractions,
            SimEstimator::BiasCorrected => EstimatorTag::BiasCorrected,
            SimEstimator::Naive => EstimatorTag::Naive,
            SimEstimator::Composite => EstimatorTag::Composite,
            SimEstimator::Weighting => EstimatorTag::Weighting,
        }
    }

    fn needs_matching(&self) -> bool {
        !matches!(self, SimEstimator::Naive | SimEstimator::Composite | SimEstimator::Weighting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMatching {
    pub kind: DistanceKind,
    /// Caliper in SDs of the estimated `pi1_as` (score-based kinds only).
    pub caliper_sd: Option<f64>,
    pub with_replacement: bool,
}

impl Default for SimMatching {
    fn default() -> Self {
        SimMatching {
            kind: DistanceKind::MahalanobisWithCaliper,
            caliper_sd: Some(0.25),
            with_replacement: true,
        }
    }
}

/// Outcome of one replicate: per-estimator reports, or why it was dropped.
#[derive(Debug)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub reports: Vec<(SimEstimator, Result<EstimateReport>)>,
    pub failure: Option<String>,
}

pub fn run_replicate(cfg: &ScenarioConfig, menu: &[SimEstimator], matching: &SimMatching, replicate: usize, seed: u64, em: &EmOptions) -> ReplicateResult {
    let mut out = ReplicateResult {
        replicate,
        seed,
        reports: Vec::new(),
        failure: None,
    };
    let sim = match generate_dataset(cfg, seed) {
        Ok(s) => s,
        Err(e) => {
            out.failure = Some(e.to_string());
            return out;
        }
    };
    let d = &sim.data;
    let features = principal_score_features(d);
    let score_needed = menu.contains(&SimEstimator::Weighting) || matching.kind != DistanceKind::Mahalanobis;
    let model: Option<PrincipalScoreModel> = if score_needed {
        match fit_em_monotonicity(d, &features, em) {
            Ok(m) if m.converged => Some(m),
            Ok(m) => {
                out.failure = Some(format!("EM did not converge in {} iterations", m.iterations));
                return out;
            }
            Err(e) => {
                out.failure = Some(format!("EM failed: {e}"));
                return out;
            }
        }
    } else {
        None
    };
    let mut matched = None;
    if menu.iter().any(|e| e.needs_matching()) {
        let columns = d.feature_names(&d.role_features(Role::Distance));
        let spec = match matching.kind {
            DistanceKind::Mahalanobis => DistanceSpec::mahalanobis(columns),
            DistanceKind::Exact => DistanceSpec::exact(columns),
            DistanceKind::PiTildeAbsDiff => {
                let mut s = DistanceSpec::pi_tilde(model.clone().expect("fitted"));
                s.caliper = matching.caliper_sd.map(Caliper::SdMultiple);
                s
            }
            DistanceKind::MahalanobisWithCaliper => DistanceSpec::mahalanobis_with_caliper(
                columns,
                model.clone().expect("fitted"),
                Caliper::SdMultiple(matching.caliper_sd.unwrap_or(0.25)),
            ),
        };
        let algorithm = if matching.with_replacement { Algorithm::Greedy } else { Algorithm::Optimal };
        let res = DistanceMetric::new(d, &spec)
            .and_then(|m| match_with_metric(d, &m, TargetGroup::UntreatedSurvivors, matching.with_replacement, algorithm).map(|s| (m, s)));
        match res {
            Ok(ms) => matched = Some(ms),
            Err(e) => {
                out.failure = Some(format!("matching failed: {e}"));
                return out;
            }
        }
    }
    let om = d.role_features(Role::OutcomeModel);
    for &est in menu {
        let r = match est {
            SimEstimator::Naive => estimate_naive(d),
            SimEstimator::Composite => estimate_composite(d),
            SimEstimator::Weighting => weighting_point(d, model.as_ref().expect("fitted")).map(|v| EstimateReport::wald(EstimatorTag::Weighting, v, f64::NAN)),
            _ => {
                let (metric, sample) = matched.as_ref().expect("matched");
                match est {
                    SimEstimator::Crude => estimate_crude(sample, d, metric),
                    SimEstimator::Regression => fit_outcome_model(d, sample, &om, false).and_then(|m| estimate_regression(&m, sample, d)),
                    SimEstimator::RegressionInteractions => fit_outcome_model(d, sample, &om, true).and_then(|m| estimate_regression(&m, sample, d)),
                    SimEstimator::BiasCorrected => fit_arm_regression(d, true, &om).and_then(|mu| estimate_bias_corrected(sample, d, metric, &mu)),
                    _ => unreachable!(),
                }
            }
        };
        out.reports.push((est, r));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: SimEstimator,
    pub mean: f64,
    pub emp_sd: f64,
    /// Mean of the estimated SEs (NaN when the estimator reports none).
    pub est_se: f64,
    pub mse: f64,
    /// Coverage of the 95% interval (NaN without SEs).
    pub cp95: f64,
    /// Replicates contributing to this row.
    pub n_ok: usize,
    /// Replicates where this estimator failed.
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub truth: f64,
    pub reps: usize,
    pub seed: u64,
    /// Replicates dropped before estimation (EM non-convergence and the like).
    pub failed_replicates: usize,
    pub failure_reasons: Vec<(usize, String)>,
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, e: SimEstimator) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == e)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["estimator", "Mean", "Emp.SD", "Est.SE", "MSE", "CP95", "n_ok", "n_failed", "truth"])?;
        for r in &self.rows {
            wtr.write_record(&[
                r.estimator.tag().to_string(),
                r.mean.to_string(),
                r.emp_sd.to_string(),
                r.est_se.to_string(),
                r.mse.to_string(),
                r.cp95.to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
                self.truth.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn summarize(results: &[ReplicateResult], menu: &[SimEstimator], truth: f64, seed: u64) -> McSummary {
    let mut results: Vec<&ReplicateResult> = results.iter().collect();
    results.sort_by_key(|r| r.replicate);
    let failure_reasons: Vec<(usize, String)> = results
        .iter()
        .filter_map(|r| r.failure.clone().map(|f| (r.replicate, f)))
        .collect();
    let rows = menu
        .iter()
        .map(|&e| {
            let mut est = Vec::new();
            let mut ses = Vec::new();
            let mut covered = 0usize;
            let mut n_failed = 0;
            for r in results.iter().filter(|r| r.failure.is_none()) {
                match r.reports.iter().find(|(k, _)| *k == e).map(|(_, v)| v) {
                    Some(Ok(rep)) if rep.estimate.is_finite() => {
                        est.push(rep.estimate);
                        ses.push(rep.se);
                        covered += usize::from(rep.covers(truth));
                    }
                    _ => n_failed += 1,
                }
            }
            let n = est.len();
            let has_se = ses.iter().all(|s| s.is_finite());
            McRow {
                estimator: e,
                mean: mean(&est),
                emp_sd: variance(&est).sqrt(),
                est_se: if has_se { mean(&ses) } else { f64::NAN },
                mse: est.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / n as f64,
                cp95: if has_se { covered as f64 / n as f64 } else { f64::NAN },
                n_ok: n,
                n_failed,
            }
        })
        .collect();
    McSummary {
        truth,
        reps: results.len(),
        seed,
        failed_replicates: failure_reasons.len(),
        failure_reasons,
        rows,
    }
}

/// Run `cfg.reps` replicates from `cfg.seed` and summarize them against the
/// true SACE.
pub fn run_scenario(cfg: &ScenarioConfig, menu: &[SimEstimator], matching: &SimMatching, em: &EmOptions) -> Result<McSummary> {
    cfg.validate()?;
    if cfg.reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let truth = true_sace(cfg, ORACLE_N, replicate_seed(cfg.seed, u64::MAX));
    let results = par_map(cfg.reps, |r| run_replicate(cfg, menu, matching, r, replicate_seed(cfg.seed, r as u64), em));
    Ok(summarize(&results, menu, truth, cfg.seed))
}
