//! Matching of survivors across treatment arms.
//!
//! Every unit of the target group (survivors of one arm) is paired with a
//! donor (a survivor of the other arm). Only survivors ever enter a matched
//! sample, so its outcome contrasts are defined for every pair.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, LexCost};
use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{covariance, pinv_symmetric, sd};
use crate::principal_score::PrincipalScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Exact,
    Mahalanobis,
    PiTildeAbsDiff,
    MahalanobisWithCaliper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caliper {
    /// Width in units of the score itself.
    Absolute(f64),
    /// Width as a multiple of the score's SD over all survivors.
    SdMultiple(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    /// Covariates entering the quadratic form (or compared for equality).
    pub columns: Vec<String>,
    pub caliper: Option<Caliper>,
    #[serde(skip)]
    pub score_model: Option<PrincipalScoreModel>,
}

impl DistanceSpec {
    pub fn mahalanobis(columns: Vec<String>) -> Self {
        DistanceSpec {
            kind: DistanceKind::Mahalanobis,
            columns,
            caliper: None,
            score_model: None,
        }
    }

    pub fn exact(columns: Vec<String>) -> Self {
        DistanceSpec {
            kind: DistanceKind::Exact,
            ..Self::mahalanobis(columns)
        }
    }

    pub fn pi_tilde(model: PrincipalScoreModel) -> Self {
        DistanceSpec {
            kind: DistanceKind::PiTildeAbsDiff,
            columns: Vec::new(),
            caliper: None,
            score_model: Some(model),
        }
    }

    pub fn mahalanobis_with_caliper(columns: Vec<String>, model: PrincipalScoreModel, caliper: Caliper) -> Self {
        DistanceSpec {
            kind: DistanceKind::MahalanobisWithCaliper,
            columns,
            caliper: Some(caliper),
            score_model: Some(model),
        }
    }

    fn validate(&self) -> Result<()> {
        let needs_model = matches!(self.kind, DistanceKind::PiTildeAbsDiff | DistanceKind::MahalanobisWithCaliper);
        if needs_model && self.score_model.is_none() {
            return Err(Error::invalid(format!("{:?} distance needs a principal score model", self.kind)));
        }
        if self.kind == DistanceKind::MahalanobisWithCaliper && self.caliper.is_none() {
            return Err(Error::invalid("caliper distance needs a caliper width"));
        }
        if let Some(Caliper::Absolute(c) | Caliper::SdMultiple(c)) = self.caliper {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("caliper must be positive, got {c}")));
            }
        }
        let needs_columns = !matches!(self.kind, DistanceKind::PiTildeAbsDiff);
        if needs_columns && self.columns.is_empty() {
            return Err(Error::invalid(format!("{:?} distance needs at least one covariate", self.kind)));
        }
        Ok(())
    }
}

/// Squared Mahalanobis distance `(xi - xj)' S^-1 (xi - xj)`. A singular `S`
/// is replaced by its pseudo-inverse.
pub fn mahalanobis_distance(xi: &[f64], xj: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if xi.len() != xj.len() || sigma.nrows() != xi.len() || sigma.ncols() != xi.len() {
        return Err(Error::DimensionMismatch {
            expected: xi.len(),
            found: if xi.len() != xj.len() { xj.len() } else { sigma.nrows() },
        });
    }
    let (inv, _) = pinv_symmetric(sigma, 1e-12);
    Ok(quadratic_form(xi, xj, &inv))
}

fn quadratic_form(xi: &[f64], xj: &[f64], inv: &DMatrix<f64>) -> f64 {
    let diff = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
    (diff.transpose() * inv * &diff)[(0, 0)].max(0.0)
}

/// A distance specification resolved against one dataset: covariate
/// indices, the inverse survivor covariance, and per-unit scores.
#[derive(Debug, Clone)]
pub struct DistanceMetric {
    kind: DistanceKind,
    /// Distance covariates of every unit of the dataset.
    rows: Vec<Vec<f64>>,
    sigma_inv: DMatrix<f64>,
    /// `pi1_as` for every unit of the dataset (empty without a score model).
    pi1: Vec<f64>,
    caliper: Option<f64>,
    /// True when the covariance had to be pseudo-inverted.
    pub singular_covariance: bool,
}

impl DistanceMetric {
    pub fn new(d: &Dataset, spec: &DistanceSpec) -> Result<Self> {
        spec.validate()?;
        let features = spec
            .columns
            .iter()
            .map(|c| d.feature_index(c))
            .collect::<Result<Vec<_>>>()?;
        let survivors: Vec<usize> = (0..d.len()).filter(|&i| d.unit(i).survived).collect();
        let (sigma_inv, singular_covariance) = if features.is_empty() {
            (DMatrix::zeros(0, 0), false)
        } else {
            let rows: Vec<Vec<f64>> = survivors
                .iter()
                .map(|&i| features.iter().map(|&j| d.unit(i).feature(j)).collect())
                .collect();
            pinv_symmetric(&covariance(&rows), 1e-12)
        };
        let pi1 = match &spec.score_model {
            Some(m) => m.pi_tilde_dataset(d)?.into_iter().map(|t| t.pi1_as).collect(),
            None => Vec::new(),
        };
        let caliper = match spec.caliper {
            None => None,
            Some(Caliper::Absolute(c)) => Some(c),
            Some(Caliper::SdMultiple(m)) => {
                if pi1.is_empty() {
                    return Err(Error::invalid("an SD-scaled caliper needs a principal score model"));
                }
                let s: Vec<f64> = survivors.iter().map(|&i| pi1[i]).collect();
                Some(m * sd(&s))
            }
        };
        let rows = d
            .units()
            .iter()
            .map(|u| features.iter().map(|&j| u.feature(j)).collect())
            .collect();
        Ok(DistanceMetric {
            kind: spec.kind,
            rows,
            sigma_inv,
            pi1,
            caliper,
            singular_covariance,
        })
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    /// Absolute caliper width in score units, if any.
    pub fn caliper_width(&self) -> Option<f64> {
        self.caliper
    }

    pub fn pi1(&self, unit: usize) -> Option<f64> {
        self.pi1.get(unit).copied()
    }

    fn quad(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.rows[i], &self.rows[j]);
        let p = a.len();
        let mut acc = 0.0;
        for r in 0..p {
            let dr = a[r] - b[r];
            for c in 0..p {
                acc += dr * self.sigma_inv[(r, c)] * (a[c] - b[c]);
            }
        }
        acc.max(0.0)
    }

    /// Distance between units `i` and `j` of `d`; `+inf` marks an inadmissible pair.
    pub fn between(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            DistanceKind::Exact => {
                if self.rows[i] == self.rows[j] {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            DistanceKind::Mahalanobis => self.quad(i, j),
            DistanceKind::PiTildeAbsDiff => {
                let diff = (self.pi1[i] - self.pi1[j]).abs();
                match self.caliper {
                    Some(c) if diff > c => f64::INFINITY,
                    _ => diff,
                }
            }
            DistanceKind::MahalanobisWithCaliper => {
                let c = self.caliper.expect("validated");
                if (self.pi1[i] - self.pi1[j]).abs() > c {
                    f64::INFINITY
                } else {
                    self.quad(i, j)
                }
            }
        }
    }

    /// Like [`between`](Self::between) but never infinite: calipers and the
    /// exactness requirement are dropped.
    pub fn between_relaxed(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            DistanceKind::PiTildeAbsDiff => (self.pi1[i] - self.pi1[j]).abs(),
            _ => self.quad(i, j),
        }
    }
}

/// Distance between two units under `spec`, resolving the spec against `d`.
pub fn distance(d: &Dataset, spec: &DistanceSpec, i: usize, j: usize) -> Result<f64> {
    Ok(DistanceMetric::new(d, spec)?.between(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetGroup {
    /// `{A=0, S=1}`: the group whose covariate distribution the SACE averages over.
    UntreatedSurvivors,
    /// `{A=1, S=1}`.
    TreatedSurvivors,
}

impl TargetGroup {
    pub fn treated(&self) -> bool {
        matches!(self, TargetGroup::TreatedSurvivors)
    }

    pub fn from_arm(a: u8) -> Self {
        if a == 1 {
            TargetGroup::TreatedSurvivors
        } else {
            TargetGroup::UntreatedSurvivors
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Greedy,
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Unit indices into the dataset.
    pub target: usize,
    pub donor: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub target_group: TargetGroup,
    pub with_replacement: bool,
    pub pairs: Vec<MatchedPair>,
    pub unmatched_targets: Vec<usize>,
    /// Donor unit index -> number of targets it serves.
    pub reuse: BTreeMap<usize, usize>,
}

impl MatchedSample {
    fn build(d: &Dataset, target_group: TargetGroup, with_replacement: bool, mut pairs: Vec<MatchedPair>, mut unmatched: Vec<usize>) -> Self {
        pairs.sort_by_key(|p| p.target);
        unmatched.sort_unstable();
        let mut reuse = BTreeMap::new();
        for p in &pairs {
            assert!(
                d.unit(p.target).survived && d.unit(p.donor).survived,
                "matched samples contain survivors only"
            );
            assert_ne!(d.unit(p.target).treated, d.unit(p.donor).treated);
            *reuse.entry(p.donor).or_insert(0) += 1;
        }
        if !with_replacement {
            assert!(reuse.values().all(|&k| k == 1), "donor reused without replacement");
        }
        MatchedSample {
            target_group,
            with_replacement,
            pairs,
            unmatched_targets: unmatched,
            reuse,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Number of targets served by donor `u` (0 if unused).
    pub fn k(&self, u: usize) -> usize {
        self.reuse.get(&u).copied().unwrap_or(0)
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }

    /// Whether every target found a donor, so the target covariate
    /// distribution is preserved.
    pub fn preserves_distribution(&self) -> bool {
        self.unmatched_targets.is_empty()
    }

    /// CSV with one row per pair: target_id, donor_id, distance, K.
    pub fn write_csv<W: Write>(&self, d: &Dataset, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["target_id", "donor_id", "distance", "K"])?;
        for p in &self.pairs {
            wtr.write_record(&[
                d.unit(p.target).id.to_string(),
                d.unit(p.donor).id.to_string(),
                p.distance.to_string(),
                self.k(p.donor).to_string(),
            ])?;
        }
        for &t in &self.unmatched_targets {
            wtr.write_record(&[d.unit(t).id.to_string(), String::new(), String::new(), String::new()])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Match every target-group survivor to a survivor of the other arm.
pub fn match_units(
    d: &Dataset,
    spec: &DistanceSpec,
    target_group: TargetGroup,
    with_replacement: bool,
    algorithm: Algorithm,
) -> Result<MatchedSample> {
    let metric = DistanceMetric::new(d, spec)?;
    match_with_metric(d, &metric, target_group, with_replacement, algorithm)
}

pub fn match_with_metric(
    d: &Dataset,
    metric: &DistanceMetric,
    target_group: TargetGroup,
    with_replacement: bool,
    algorithm: Algorithm,
) -> Result<MatchedSample> {
    let targets = d.survivors(target_group.treated());
    let mut donors = d.survivors(!target_group.treated());
    if targets.is_empty() {
        return Err(Error::EmptyGroup(format!("target group {{A={},S=1}}", target_group.treated() as u8)));
    }
    if donors.is_empty() {
        return Err(Error::EmptyGroup(format!("donor group {{A={},S=1}}", !target_group.treated() as u8)));
    }
    // Ties go to the lowest donor id, so scan donors in id order.
    donors.sort_by_key(|&j| (d.unit(j).id, j));

    let dist: Vec<Vec<f64>> = targets
        .iter()
        .map(|&t| donors.iter().map(|&j| metric.between(t, j)).collect())
        .collect();

    let (pairs, unmatched) = if with_replacement {
        nearest_with_replacement(&targets, &donors, &dist)
    } else {
        match algorithm {
            Algorithm::Greedy => greedy(d, metric, &targets, &donors, &dist),
            Algorithm::Optimal => optimal(&targets, &donors, &dist),
        }
    };
    Ok(MatchedSample::build(d, target_group, with_replacement, pairs, unmatched))
}

fn argmin_finite<'a>(row: impl Iterator<Item = (usize, &'a f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row {
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((j, v));
        }
    }
    best
}

fn nearest_with_replacement(targets: &[usize], donors: &[usize], dist: &[Vec<f64>]) -> (Vec<MatchedPair>, Vec<usize>) {
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (ti, &t) in targets.iter().enumerate() {
        match argmin_finite(dist[ti].iter().enumerate()) {
            Some((j, v)) => pairs.push(MatchedPair {
                target: t,
                donor: donors[j],
                distance: v,
            }),
            None => unmatched.push(t),
        }
    }
    (pairs, unmatched)
}

fn greedy(
    d: &Dataset,
    metric: &DistanceMetric,
    targets: &[usize],
    donors: &[usize],
    dist: &[Vec<f64>],
) -> (Vec<MatchedPair>, Vec<usize>) {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    if metric.pi1(targets[0]).is_some() {
        order.sort_by(|&a, &b| {
            let (pa, pb) = (metric.pi1[targets[a]], metric.pi1[targets[b]]);
            pb.total_cmp(&pa).then(a.cmp(&b))
        });
    } else {
        order.sort_by_key(|&a| d.unit(targets[a]).id);
    }
    let mut used = vec![false; donors.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for ti in order {
        let t = targets[ti];
        match argmin_finite(dist[ti].iter().enumerate().filter(|(j, _)| !used[*j])) {
            Some((j, v)) => {
                used[j] = true;
                pairs.push(MatchedPair {
                    target: t,
                    donor: donors[j],
                    distance: v,
                });
            }
            None => unmatched.push(t),
        }
    }
    (pairs, unmatched)
}

/// Maximum number of admissible pairs, and among those the minimum total
/// distance. Each target also owns a private "stay unmatched" column whose
/// cost sits between an admissible and an inadmissible pair.
fn optimal(targets: &[usize], donors: &[usize], dist: &[Vec<f64>]) -> (Vec<MatchedPair>, Vec<usize>) {
    let n = targets.len();
    let m = donors.len() + n;
    let mut cost = vec![LexCost::new(2, 0.0); n * m];
    for i in 0..n {
        for (j, &v) in dist[i].iter().enumerate() {
            if v.is_finite() {
                cost[i * m + j] = LexCost::new(0, v);
            }
        }
        for k in 0..n {
            cost[i * m + donors.len() + k] = LexCost::new(1, 0.0);
        }
    }
    let assign = hungarian(&cost, n, m);
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (i, &j) in assign.iter().enumerate() {
        if j < donors.len() && dist[i][j].is_finite() {
            pairs.push(MatchedPair {
                target: targets[i],
                donor: donors[j],
                distance: dist[i][j],
            });
        } else {
            unmatched.push(targets[i]);
        }
    }
    (pairs, unmatched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean: f64,
    pub sd: f64,
    /// Weighted count of ones (binary covariates only).
    pub count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub kind: ColumnKind,
    pub untreated: ArmSummary,
    pub treated: ArmSummary,
    pub smd: f64,
}

fn summarize(d: &Dataset, feature: usize, kind: ColumnKind, group: &[(usize, f64)]) -> ArmSummary {
    let wsum: f64 = group.iter().map(|(_, w)| w).sum();
    let mean = group.iter().map(|&(i, w)| w * d.unit(i).feature(feature)).sum::<f64>() / wsum;
    let ss: f64 = group
        .iter()
        .map(|&(i, w)| w * (d.unit(i).feature(feature) - mean).powi(2))
        .sum();
    let sd = if wsum > 1.0 { (ss / (wsum - 1.0)).sqrt() } else { 0.0 };
    ArmSummary {
        mean,
        sd,
        count: (kind == ColumnKind::Binary).then_some(mean * wsum),
    }
}

/// Balance of `features` between two weighted groups of units. Weights act
/// as frequency weights. SMD uses the pooled SD `sqrt((s0^2 + s1^2) / 2)`.
pub fn balance_table_weighted(
    d: &Dataset,
    features: &[usize],
    treated: &[(usize, f64)],
    untreated: &[(usize, f64)],
) -> Result<Vec<BalanceRow>> {
    if treated.is_empty() || untreated.is_empty() {
        return Err(Error::EmptyGroup("balance table needs units in both groups".into()));
    }
    Ok(features
        .iter()
        .map(|&f| {
            let meta = d.feature_meta(f);
            let t = summarize(d, f, meta.kind, treated);
            let u = summarize(d, f, meta.kind, untreated);
            let pooled = ((t.sd * t.sd + u.sd * u.sd) / 2.0).sqrt();
            let smd = if t.mean == u.mean {
                0.0
            } else if pooled > 0.0 {
                (t.mean - u.mean) / pooled
            } else {
                f64::INFINITY.copysign(t.mean - u.mean)
            };
            BalanceRow {
                covariate: meta.name.clone(),
                kind: meta.kind,
                untreated: u,
                treated: t,
                smd,
            }
        })
        .collect())
}

/// Balance between two raw groups of unit indices.
pub fn balance_table_raw(d: &Dataset, features: &[usize], treated: &[usize], untreated: &[usize]) -> Result<Vec<BalanceRow>> {
    let w = |g: &[usize]| g.iter().map(|&i| (i, 1.0)).collect::<Vec<_>>();
    balance_table_weighted(d, features, &w(treated), &w(untreated))
}

/// Balance in a matched sample; donors count once per target they serve.
pub fn balance_table_matched(d: &Dataset, features: &[usize], sample: &MatchedSample) -> Result<Vec<BalanceRow>> {
    let targets: Vec<(usize, f64)> = sample.pairs.iter().map(|p| (p.target, 1.0)).collect();
    let donors: Vec<(usize, f64)> = sample.reuse.iter().map(|(&u, &k)| (u, k as f64)).collect();
    if sample.target_group.treated() {
        balance_table_weighted(d, features, &targets, &donors)
    } else {
        balance_table_weighted(d, features, &donors, &targets)
    }
}

/// Table layout: one row per covariate, summaries per arm, then SMD.
pub fn write_balance_csv<W: Write>(rows: &[BalanceRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "covariate",
        "kind",
        "untreated_mean",
        "untreated_sd",
        "untreated_count",
        "treated_mean",
        "treated_sd",
        "treated_count",
        "smd",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        wtr.write_record(&[
            r.covariate.clone(),
            match r.kind {
                ColumnKind::Continuous => "continuous".to_string(),
                ColumnKind::Binary => "binary".to_string(),
            },
            r.untreated.mean.to_string(),
            r.untreated.sd.to_string(),
            opt(r.untreated.count),
            r.treated.mean.to_string(),
            r.treated.sd.to_string(),
            opt(r.treated.count),
            r.smd.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
