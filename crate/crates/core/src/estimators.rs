//! SACE and CSE point estimates, standard errors and confidence intervals.
//!
//! Every report is oriented treated-minus-untreated, whichever arm the
//! matched targets come from.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Role};
use crate::error::{Error, Result};
use crate::linalg::{dot, mean, variance, weighted_least_squares, Design};
use crate::matching::{match_with_metric, Algorithm, DistanceMetric, DistanceSpec, MatchedSample, TargetGroup};
use crate::principal_score::{fit_em_monotonicity, EmOptions, PrincipalScoreModel, Variant};
use crate::rng::{par_map, stream_rng};

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EstimatorTag {
    Crude,
    Regression,
    RegressionInteractions,
    BiasCorrected,
    Weighting,
    Naive,
    Composite,
    Cse { a_s: u8 },
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorTag::Crude => f.write_str("crude"),
            EstimatorTag::Regression => f.write_str("regression"),
            EstimatorTag::RegressionInteractions => f.write_str("regression_interactions"),
            EstimatorTag::BiasCorrected => f.write_str("bias_corrected"),
            EstimatorTag::Weighting => f.write_str("weighting"),
            EstimatorTag::Naive => f.write_str("naive"),
            EstimatorTag::Composite => f.write_str("composite"),
            EstimatorTag::Cse { a_s } => write!(f, "cse({a_s})"),
        }
    }
}

impl FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "crude" => EstimatorTag::Crude,
            "regression" => EstimatorTag::Regression,
            "regression_interactions" => EstimatorTag::RegressionInteractions,
            "bias_corrected" => EstimatorTag::BiasCorrected,
            "weighting" => EstimatorTag::Weighting,
            "naive" => EstimatorTag::Naive,
            "composite" => EstimatorTag::Composite,
            "cse(0)" => EstimatorTag::Cse { a_s: 0 },
            "cse(1)" => EstimatorTag::Cse { a_s: 1 },
            other => return Err(Error::invalid(format!("unknown estimator tag `{other}`"))),
        })
    }
}

impl From<EstimatorTag> for String {
    fn from(t: EstimatorTag) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for EstimatorTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Wald,
    Percentile,
}

/// Sensitivity parameters in force when an estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub alpha1: f64,
    pub alpha0: f64,
    pub xi: f64,
}

impl Default for SensitivityParams {
    fn default() -> Self {
        SensitivityParams {
            alpha1: 1.0,
            alpha0: 1.0,
            xi: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorTag,
    pub estimate: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub interval: IntervalKind,
    /// Matched pairs behind the estimate (None for unmatched estimators).
    pub n_pairs: Option<usize>,
    pub n_unmatched: usize,
    pub params: SensitivityParams,
}

impl EstimateReport {
    pub fn wald(estimator: EstimatorTag, estimate: f64, se: f64) -> Self {
        EstimateReport {
            estimator,
            estimate,
            se,
            ci95: (estimate - Z95 * se, estimate + Z95 * se),
            interval: IntervalKind::Wald,
            n_pairs: None,
            n_unmatched: 0,
            params: SensitivityParams::default(),
        }
    }

    pub(crate) fn with_sample(mut self, s: &MatchedSample) -> Self {
        self.n_pairs = Some(s.n_pairs());
        self.n_unmatched = s.unmatched_targets.len();
        self
    }

    pub fn with_params(mut self, params: SensitivityParams) -> Self {
        self.params = params;
        self
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci95.0 <= value && value <= self.ci95.1
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "estimator",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "interval",
        "n_pairs",
        "n_unmatched",
        "alpha1",
        "alpha0",
        "xi",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.estimator.to_string(),
            self.estimate.to_string(),
            self.se.to_string(),
            self.ci95.0.to_string(),
            self.ci95.1.to_string(),
            match self.interval {
                IntervalKind::Wald => "wald".into(),
                IntervalKind::Percentile => "percentile".into(),
            },
            self.n_pairs.map(|n| n.to_string()).unwrap_or_default(),
            self.n_unmatched.to_string(),
            self.params.alpha1.to_string(),
            self.params.alpha0.to_string(),
            self.params.xi.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_reports_csv<W: Write>(reports: &[EstimateReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(EstimateReport::CSV_HEADER)?;
    for r in reports {
        wtr.write_record(r.csv_row())?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn check_sample(sample: &MatchedSample) -> Result<()> {
    if sample.pairs.is_empty() {
        return Err(Error::EmptyGroup("matched sample has no pairs".into()));
    }
    Ok(())
}

/// Treated-minus-untreated outcome difference of every pair.
pub fn pair_differences(sample: &MatchedSample, d: &Dataset) -> Vec<f64> {
    let sign = if sample.target_group.treated() { -1.0 } else { 1.0 };
    sample
        .pairs
        .iter()
        .map(|p| sign * (d.unit(p.donor).outcome() - d.unit(p.target).outcome()))
        .collect()
}

/// `(Y_u - Y_l)^2 / 2` where `l` is the nearest other survivor of `u`'s arm.
fn conditional_variance(d: &Dataset, metric: &DistanceMetric, u: usize) -> f64 {
    let arm = d.unit(u).treated;
    let mut best: Option<(f64, usize)> = None;
    let mut best_relaxed: Option<(f64, usize)> = None;
    for (j, r) in d.units().iter().enumerate() {
        if j == u || !r.survived || r.treated != arm {
            continue;
        }
        let dist = metric.between(u, j);
        if dist.is_finite() && best.is_none_or(|(b, _)| dist < b) {
            best = Some((dist, j));
        }
        if best.is_none() {
            let relaxed = metric.between_relaxed(u, j);
            if best_relaxed.is_none_or(|(b, _)| relaxed < b) {
                best_relaxed = Some((relaxed, j));
            }
        }
    }
    match best.or(best_relaxed) {
        Some((_, l)) => {
            let diff = d.unit(u).outcome() - d.unit(l).outcome();
            diff * diff / 2.0
        }
        None => 0.0,
    }
}

/// Variance of the mean pair difference. Paired-difference variance without
/// replacement; the matching-with-replacement formula with reused donors.
fn mean_difference_variance(sample: &MatchedSample, d: &Dataset, metric: &DistanceMetric, diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    if !sample.with_replacement {
        return variance(diffs) / n;
    }
    let tau = mean(diffs);
    let mut sigma2: BTreeMap<usize, f64> = BTreeMap::new();
    let mut s2 = |u: usize| *sigma2.entry(u).or_insert_with(|| conditional_variance(d, metric, u));
    let mut spread = 0.0;
    let mut noise = 0.0;
    let mut target_part = 0.0;
    for (p, &diff) in sample.pairs.iter().zip(diffs) {
        let (st, sd) = (s2(p.target), s2(p.donor));
        spread += (diff - tau) * (diff - tau);
        noise += st + sd;
        target_part += st;
    }
    let donor_part: f64 = sample
        .reuse
        .iter()
        .map(|(&u, &k)| (k * k) as f64 * s2(u))
        .sum();
    let h = (spread - noise) / (n * n);
    h.max(0.0) + (target_part + donor_part) / (n * n)
}

/// Mean of the pair differences.
pub fn estimate_crude(sample: &MatchedSample, d: &Dataset, metric: &DistanceMetric) -> Result<EstimateReport> {
    check_sample(sample)?;
    let diffs = pair_differences(sample, d);
    let est = mean(&diffs);
    let var = mean_difference_variance(sample, d, metric, &diffs);
    Ok(EstimateReport::wald(EstimatorTag::Crude, est, var.sqrt()).with_sample(sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FittedOn {
    MatchedSample,
    Survivors,
}

/// Linear model `Y = b0 + b1*A + b2'X [+ g'(A*X)]` among survivors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub covariates: Vec<String>,
    pub interactions: bool,
    pub fitted_on: FittedOn,
    /// `[b0, b1, b2.., g..]`.
    pub coefficients: Vec<f64>,
    /// Cluster-robust covariance of the coefficients.
    pub vcov: DMatrix<f64>,
    pub units: Vec<usize>,
    pub fit_weights: Vec<f64>,
    pub clusters: Vec<usize>,
    pub residuals: Vec<f64>,
}

impl OutcomeModel {
    pub fn k(&self) -> usize {
        self.covariates.len()
    }

    pub fn treatment_effect(&self) -> f64 {
        self.coefficients[1]
    }

    /// Interaction slopes (empty without interactions).
    pub fn interaction_slopes(&self) -> &[f64] {
        if self.interactions {
            &self.coefficients[2 + self.k()..]
        } else {
            &[]
        }
    }

    /// E(Y | A = a, S = 1, X = x).
    pub fn predict(&self, a: u8, x: &[f64]) -> f64 {
        dot(&self.coefficients, &self.design_row(a, x))
    }

    /// Regressor vector of a unit with treatment `a` and covariates `x`.
    pub fn design_row(&self, a: u8, x: &[f64]) -> Vec<f64> {
        design_row(a, x, self.interactions)
    }

    /// Conditional contrast `g(x)`; constant `b1` without interactions.
    pub fn contrast(&self, x: &[f64]) -> f64 {
        self.treatment_effect() + dot(self.interaction_slopes(), &x[..self.interaction_slopes().len()])
    }
}

fn design_row(a: u8, x: &[f64], interactions: bool) -> Vec<f64> {
    let a = f64::from(a);
    let mut r = Vec::with_capacity(2 + 2 * x.len());
    r.push(1.0);
    r.push(a);
    r.extend_from_slice(x);
    if interactions {
        r.extend(x.iter().map(|v| a * v));
    }
    r
}

fn covariate_row(d: &Dataset, u: usize, features: &[usize]) -> Vec<f64> {
    features.iter().map(|&j| d.unit(u).feature(j)).collect()
}

struct FitRow {
    unit: usize,
    weight: f64,
    cluster: usize,
}

fn fit_rows(d: &Dataset, rows: Vec<FitRow>, features: &[usize], interactions: bool, fitted_on: FittedOn) -> Result<OutcomeModel> {
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| design_row(d.unit(r.unit).a(), &covariate_row(d, r.unit, features), interactions))
        .collect();
    let x = Design::from_rows(&design);
    let y: Vec<f64> = rows.iter().map(|r| d.unit(r.unit).outcome()).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    let (beta, bread) = weighted_least_squares(&x, &y, &w)?;
    let p = x.ncols();
    let residuals: Vec<f64> = (0..x.nrows()).map(|i| y[i] - dot(x.row(i), beta.as_slice())).collect();
    let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let s = scores.entry(r.cluster).or_insert_with(|| DVector::zeros(p));
        for (a, xa) in x.row(i).iter().enumerate() {
            s[a] += r.weight * xa * residuals[i];
        }
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    let vcov = &bread * meat * &bread;
    Ok(OutcomeModel {
        covariates: d.feature_names(features),
        interactions,
        fitted_on,
        coefficients: beta.iter().copied().collect(),
        vcov,
        units: rows.iter().map(|r| r.unit).collect(),
        fit_weights: w,
        clusters: rows.iter().map(|r| r.cluster).collect(),
        residuals,
    })
}

/// Weighted least squares on a matched sample: targets weigh 1 and each
/// donor weighs the number of targets it serves. Clusters are donor-centred
/// groups, which are the pairs themselves without replacement.
pub fn fit_outcome_model(d: &Dataset, sample: &MatchedSample, features: &[usize], interactions: bool) -> Result<OutcomeModel> {
    check_sample(sample)?;
    let mut rows: Vec<FitRow> = sample
        .pairs
        .iter()
        .map(|p| FitRow {
            unit: p.target,
            weight: 1.0,
            cluster: p.donor,
        })
        .collect();
    rows.extend(sample.reuse.iter().map(|(&u, &k)| FitRow {
        unit: u,
        weight: k as f64,
        cluster: u,
    }));
    fit_rows(d, rows, features, interactions, FittedOn::MatchedSample)
}

/// Ordinary least squares on all survivors with heteroskedasticity-robust
/// errors.
pub fn fit_outcome_model_survivors(d: &Dataset, features: &[usize], interactions: bool) -> Result<OutcomeModel> {
    let rows: Vec<FitRow> = (0..d.len())
        .filter(|&u| d.unit(u).survived)
        .map(|u| FitRow {
            unit: u,
            weight: 1.0,
            cluster: u,
        })
        .collect();
    fit_rows(d, rows, features, interactions, FittedOn::Survivors)
}

/// Target-averaged contrast of a matched-sample model and its gradient with
/// respect to the coefficients.
pub(crate) fn regression_contrast(model: &OutcomeModel, sample: &MatchedSample, d: &Dataset) -> Result<(f64, DVector<f64>)> {
    check_sample(sample)?;
    let expected_rows = sample.n_pairs() + sample.reuse.len();
    if model.fitted_on != FittedOn::MatchedSample || model.units.len() != expected_rows {
        return Err(Error::invalid("outcome model was not fitted on this matched sample"));
    }
    let mut l = DVector::zeros(model.coefficients.len());
    l[1] = 1.0;
    if !model.interactions {
        return Ok((model.treatment_effect(), l));
    }
    let features = model_features(model, d)?;
    let k = features.len();
    let mut xbar = vec![0.0; k];
    for p in &sample.pairs {
        for (m, &j) in xbar.iter_mut().zip(&features) {
            *m += d.unit(p.target).feature(j);
        }
    }
    let n = sample.n_pairs() as f64;
    xbar.iter_mut().for_each(|m| *m /= n);
    for (i, m) in xbar.iter().enumerate() {
        l[2 + k + i] = *m;
    }
    Ok((model.contrast(&xbar), l))
}

pub(crate) fn model_features(model: &OutcomeModel, d: &Dataset) -> Result<Vec<usize>> {
    model.covariates.iter().map(|c| d.feature_index(c)).collect()
}

pub(crate) fn quadratic_se(model: &OutcomeModel, l: &DVector<f64>) -> f64 {
    (l.transpose() * &model.vcov * l)[(0, 0)].max(0.0).sqrt()
}

/// Average of `g(x)` over the matched targets, with a delta-method SE.
/// Without interactions this is the treatment coefficient itself.
pub fn estimate_regression(model: &OutcomeModel, sample: &MatchedSample, d: &Dataset) -> Result<EstimateReport> {
    let (est, l) = regression_contrast(model, sample, d)?;
    let tag = if model.interactions {
        EstimatorTag::RegressionInteractions
    } else {
        EstimatorTag::Regression
    };
    Ok(EstimateReport::wald(tag, est, quadratic_se(model, &l)).with_sample(sample))
}

/// Linear regression of Y on X within the survivors of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRegression {
    pub treated: bool,
    pub covariates: Vec<String>,
    pub coefficients: Vec<f64>,
}

impl ArmRegression {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + dot(&self.coefficients[1..], x)
    }
}

pub fn fit_arm_regression(d: &Dataset, treated: bool, features: &[usize]) -> Result<ArmRegression> {
    let units = d.survivors(treated);
    if units.is_empty() {
        return Err(Error::EmptyGroup(format!("no survivors with A={}", u8::from(treated))));
    }
    let rows: Vec<Vec<f64>> = units
        .iter()
        .map(|&u| std::iter::once(1.0).chain(features.iter().map(|&j| d.unit(u).feature(j))).collect())
        .collect();
    let y: Vec<f64> = units.iter().map(|&u| d.unit(u).outcome()).collect();
    let (beta, _) = weighted_least_squares(&Design::from_rows(&rows), &y, &vec![1.0; units.len()])?;
    Ok(ArmRegression {
        treated,
        covariates: d.feature_names(features),
        coefficients: beta.iter().copied().collect(),
    })
}

/// Matching estimator with regression adjustment of the donor outcomes.
/// `mu` must be fitted on the donor arm before matching.
pub fn estimate_bias_corrected(sample: &MatchedSample, d: &Dataset, metric: &DistanceMetric, mu: &ArmRegression) -> Result<EstimateReport> {
    check_sample(sample)?;
    if !sample.with_replacement {
        return Err(Error::invalid("the bias-corrected estimator needs a sample matched with replacement"));
    }
    if mu.treated == sample.target_group.treated() {
        return Err(Error::invalid("the bias-correction regression must be fitted on the donor arm"));
    }
    let features = mu
        .covariates
        .iter()
        .map(|c| d.feature_index(c))
        .collect::<Result<Vec<_>>>()?;
    let sign = if sample.target_group.treated() { -1.0 } else { 1.0 };
    let diffs: Vec<f64> = sample
        .pairs
        .iter()
        .map(|p| {
            let shift = mu.predict(&covariate_row(d, p.target, &features)) - mu.predict(&covariate_row(d, p.donor, &features));
            sign * (d.unit(p.donor).outcome() + shift - d.unit(p.target).outcome())
        })
        .collect();
    let est = mean(&diffs);
    let var = mean_difference_variance(sample, d, metric, &diffs);
    Ok(EstimateReport::wald(EstimatorTag::BiasCorrected, est, var.sqrt()).with_sample(sample))
}

/// Point estimate of the weighting comparator.
///
/// Under monotonicity the always-survivor covariate density is proportional
/// to the treated-survivor density times `pi1_as(x)`, so the treated
/// always-survivor mean is a `pi1_as`-weighted mean over treated survivors;
/// the untreated survivors are exactly the always-survivors.
pub fn weighting_point(d: &Dataset, m: &PrincipalScoreModel) -> Result<f64> {
    if m.variant != Variant::Monotonicity {
        return Err(Error::invalid("the weighting estimator needs a monotonicity score model"));
    }
    let features = m.feature_indices(d)?;
    let (mut num, mut den) = (0.0, 0.0);
    for u in d.survivors(true) {
        let w = m.predict_pi_tilde(&m.covariate_row(d, u, &features))?.pi1_as;
        num += w * d.unit(u).outcome();
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::invalid("all pi1_as weights are zero"));
    }
    let control: Vec<f64> = d.survivors(false).iter().map(|&u| d.unit(u).outcome()).collect();
    if control.is_empty() {
        return Err(Error::EmptyGroup("no untreated survivors".into()));
    }
    Ok(num / den - mean(&control))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub seed: u64,
    /// Refit the score model in every resample (warm-started at the fit).
    pub refit_em: bool,
    pub em: EmOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            n_boot: 500,
            seed: 0,
            refit_em: true,
            em: EmOptions::default(),
        }
    }
}

/// Weighting comparator with a percentile bootstrap interval. Resamples
/// whose refit fails are dropped; `n_pairs` stays empty and the count of
/// usable resamples is not part of the report.
pub fn estimate_weighting(d: &Dataset, m: &PrincipalScoreModel, opts: &BootstrapOptions) -> Result<EstimateReport> {
    let est = weighting_point(d, m)?;
    let features = m.feature_indices(d)?;
    let n = d.len();
    let mut em = opts.em.clone();
    em.init = Some(m.coef_matrix());
    let draws: Vec<Option<f64>> = par_map(opts.n_boot, |b| {
        let mut rng = stream_rng(opts.seed, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sub = d.subset(&idx);
        if opts.refit_em {
            let refit = fit_em_monotonicity(&sub, &features, &em).ok()?;
            weighting_point(&sub, &refit).ok()
        } else {
            weighting_point(&sub, m).ok()
        }
    });
    let mut ok: Vec<f64> = draws.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::invalid("too few usable bootstrap resamples"));
    }
    ok.sort_by(f64::total_cmp);
    let mut report = EstimateReport::wald(EstimatorTag::Weighting, est, variance(&ok).sqrt());
    report.ci95 = (quantile_sorted(&ok, 0.025), quantile_sorted(&ok, 0.975));
    report.interval = IntervalKind::Percentile;
    Ok(report)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn welch(tag: EstimatorTag, treated: &[f64], untreated: &[f64]) -> Result<EstimateReport> {
    if treated.is_empty() || untreated.is_empty() {
        return Err(Error::EmptyGroup("both arms must be non-empty".into()));
    }
    let est = mean(treated) - mean(untreated);
    let se = (variance(treated) / treated.len() as f64 + variance(untreated) / untreated.len() as f64).sqrt();
    Ok(EstimateReport::wald(tag, est, se))
}

/// Difference in survivor means.
pub fn estimate_naive(d: &Dataset) -> Result<EstimateReport> {
    let y = |a| d.survivors(a).iter().map(|&u| d.unit(u).outcome()).collect::<Vec<_>>();
    welch(EstimatorTag::Naive, &y(true), &y(false))
}

/// Difference in means of `S * Y`, non-survivors contributing zero.
pub fn estimate_composite(d: &Dataset) -> Result<EstimateReport> {
    let sy = |a| {
        d.arm(a)
            .iter()
            .map(|&u| {
                let r = d.unit(u);
                if r.survived {
                    r.outcome()
                } else {
                    0.0
                }
            })
            .collect::<Vec<_>>()
    };
    welch(EstimatorTag::Composite, &sy(true), &sy(false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CseEstimator {
    Crude,
    Regression,
    RegressionInteractions,
}

/// Conditional separable effect for the survivors of arm `a_s`: match them
/// to the other arm on the spec's columns, then contrast outcomes. The
/// regression variants adjust for the outcome-model covariates and every
/// post-treatment column.
pub fn estimate_cse(
    d: &Dataset,
    a_s: u8,
    spec: &DistanceSpec,
    estimator: CseEstimator,
    with_replacement: bool,
) -> Result<EstimateReport> {
    if d.x1_columns().is_empty() {
        return Err(Error::invalid("no post-treatment (x1) columns declared"));
    }
    if a_s > 1 {
        return Err(Error::invalid(format!("a_s must be 0 or 1, got {a_s}")));
    }
    let target = TargetGroup::from_arm(a_s);
    if d.survivors(target.treated()).is_empty() {
        return Err(Error::EmptyGroup(format!("no survivors with A={a_s}")));
    }
    let metric = DistanceMetric::new(d, spec)?;
    let algorithm = if with_replacement { Algorithm::Greedy } else { Algorithm::Optimal };
    let sample = match_with_metric(d, &metric, target, with_replacement, algorithm)?;
    let mut report = match estimator {
        CseEstimator::Crude => estimate_crude(&sample, d, &metric)?,
        CseEstimator::Regression | CseEstimator::RegressionInteractions => {
            let mut features = d.role_features(Role::OutcomeModel);
            for j in d.role_features(Role::PostTreatment) {
                if !features.contains(&j) {
                    features.push(j);
                }
            }
            let interactions = estimator == CseEstimator::RegressionInteractions;
            let model = fit_outcome_model(d, &sample, &features, interactions)?;
            estimate_regression(&model, &sample, d)?
        }
    };
    report.estimator = EstimatorTag::Cse { a_s };
    Ok(report)
}
