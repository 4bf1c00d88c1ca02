//! Sensitivity of a regression-based SACE estimate to the two untestable
//! assumptions: equal treated means of always-survivors and protected
//! (`alpha1`), and no harmed stratum (`xi`, `alpha0`).
//!
//! Each grid point is the base estimate plus the target average of an
//! adjustment term that is exactly zero at the assumption-respecting values.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_outcome_model, model_features, quadratic_se, regression_contrast, EstimateReport, OutcomeModel, SensitivityParams,
};
use crate::matching::{match_with_metric, Algorithm, DistanceMetric, DistanceSpec, MatchedSample, TargetGroup};
use crate::principal_score::{fit_em_cpsr, xi_bounds_for, EmOptions, PrincipalScoreModel, Variant};
use crate::rng::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKind {
    Ppi,
    Monotonicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub kind: SensitivityKind,
    /// Sorted by `(xi, alpha0)` or by `alpha1`.
    pub points: Vec<EstimateReport>,
}

impl SensitivityGrid {
    pub fn point(&self, params: SensitivityParams) -> Option<&EstimateReport> {
        self.points.iter().find(|r| r.params == params)
    }

    /// Tidy CSV: parameter columns then estimate, se, ci_lo, ci_hi.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        match self.kind {
            SensitivityKind::Ppi => wtr.write_record(["alpha1", "estimate", "se", "ci_lo", "ci_hi"])?,
            SensitivityKind::Monotonicity => wtr.write_record(["xi", "alpha0", "estimate", "se", "ci_lo", "ci_hi"])?,
        }
        for r in &self.points {
            let mut row = match self.kind {
                SensitivityKind::Ppi => vec![r.params.alpha1.to_string()],
                SensitivityKind::Monotonicity => vec![r.params.xi.to_string(), r.params.alpha0.to_string()],
            };
            row.extend([r.estimate, r.se, r.ci95.0, r.ci95.1].map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// `lo, lo + step, ...` up to `hi` inclusive, rounded to 10 decimals so grid
/// values print cleanly.
pub fn parameter_range(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && step.is_finite() && step > 0.0 && hi >= lo) {
        return Err(Error::invalid(format!("invalid range {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e10).round() / 1e10).collect())
}

pub fn default_alpha1_grid() -> Vec<f64> {
    parameter_range(0.5, 2.0, 0.1).expect("valid range")
}

pub fn default_alpha0_grid() -> Vec<f64> {
    parameter_range(0.5, 2.0, 0.25).expect("valid range")
}

/// `0, 0.1, ...` below the upper bound, then the bound itself.
pub fn default_xi_grid(upper: f64) -> Vec<f64> {
    let mut g = parameter_range(0.0, upper, 0.1).expect("valid range");
    if g.last().is_some_and(|&v| upper - v > 1e-9) {
        g.push(upper);
    }
    g
}

/// Base regression estimate plus per-target regressor rows.
struct Base {
    estimate: f64,
    grad: DVector<f64>,
    /// Regressors at A = 1 and A = 0 for every matched target.
    z1: Vec<Vec<f64>>,
    z0: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

impl Base {
    fn new(d: &Dataset, sample: &MatchedSample, model: &OutcomeModel) -> Result<Self> {
        if sample.target_group != TargetGroup::UntreatedSurvivors {
            return Err(Error::invalid("sensitivity sweeps need untreated survivors as targets"));
        }
        let (estimate, grad) = regression_contrast(model, sample, d)?;
        let features = model_features(model, d)?;
        let x = |u: usize| features.iter().map(|&j| d.unit(u).feature(j)).collect::<Vec<_>>();
        let targets: Vec<usize> = sample.pairs.iter().map(|p| p.target).collect();
        Ok(Base {
            estimate,
            grad,
            z1: targets.iter().map(|&u| model.design_row(1, &x(u))).collect(),
            z0: targets.iter().map(|&u| model.design_row(0, &x(u))).collect(),
            targets,
        })
    }

    /// Report for adjustments `adj_i = m_i * z_i' theta` where `z` is `z1` or `z0`.
    fn adjusted(&self, model: &OutcomeModel, sample: &MatchedSample, multipliers: &[f64], treated_arm: bool, params: SensitivityParams) -> EstimateReport {
        let rows = if treated_arm { &self.z1 } else { &self.z0 };
        let n = rows.len() as f64;
        let theta = DVector::from_column_slice(&model.coefficients);
        let mut adj = 0.0;
        let mut g = DVector::zeros(theta.len());
        for (z, &m) in rows.iter().zip(multipliers) {
            let z = DVector::from_column_slice(z);
            adj += m * z.dot(&theta);
            g += z * m;
        }
        let est = self.estimate + adj / n;
        let l = &self.grad + g / n;
        EstimateReport::wald(
            if model.interactions {
                crate::estimators::EstimatorTag::RegressionInteractions
            } else {
                crate::estimators::EstimatorTag::Regression
            },
            est,
            quadratic_se(model, &l),
        )
        .with_sample(sample)
        .with_params(params)
    }
}

/// Sweep `alpha1`, the ratio of protected to always-survivor treated means.
/// The matched sample and both models stay fixed across the sweep.
pub fn sweep_ppi(
    d: &Dataset,
    sample: &MatchedSample,
    model: &OutcomeModel,
    score: &PrincipalScoreModel,
    alpha1_values: &[f64],
) -> Result<SensitivityGrid> {
    if alpha1_values.is_empty() {
        return Err(Error::invalid("empty alpha1 grid"));
    }
    if let Some(&a) = alpha1_values.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid(format!("alpha1 must be positive, got {a}")));
    }
    if score.variant != Variant::Monotonicity {
        return Err(Error::invalid("the alpha1 sweep needs a monotonicity score model"));
    }
    let base = Base::new(d, sample, model)?;
    let features = score.feature_indices(d)?;
    let pi1 = base
        .targets
        .iter()
        .map(|&u| Ok(score.predict_pi_tilde(&score.covariate_row(d, u, &features))?.pi1_as))
        .collect::<Result<Vec<f64>>>()?;
    let mut alphas = alpha1_values.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let points = par_map(alphas.len(), |i| {
        let a1 = alphas[i];
        let mult: Vec<f64> = pi1
            .iter()
            .map(|p| {
                let denom = 1.0 + (a1 - 1.0) * (1.0 - p);
                assert!(denom > 0.0, "non-positive denominator at alpha1 = {a1}");
                1.0 / denom - 1.0
            })
            .collect();
        let params = SensitivityParams {
            alpha1: a1,
            ..SensitivityParams::default()
        };
        base.adjusted(model, sample, &mult, true, params)
    });
    Ok(SensitivityGrid {
        kind: SensitivityKind::Ppi,
        points,
    })
}

fn check_monotonicity_grid(d: &Dataset, xi_values: &[f64], alpha0_values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if xi_values.is_empty() || alpha0_values.is_empty() {
        return Err(Error::invalid("empty xi or alpha0 grid"));
    }
    if let Some(&a) = alpha0_values.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid(format!("alpha0 must be positive, got {a}")));
    }
    let (lo, hi) = xi_bounds_for(d)?;
    if let Some(&xi) = xi_values.iter().find(|&&x| !(x >= lo - 1e-12 && x <= hi + 1e-12)) {
        return Err(Error::OutOfBounds {
            name: "xi",
            value: xi,
            lo,
            hi,
        });
    }
    let mut xs = xi_values.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut a0 = alpha0_values.to_vec();
    a0.sort_by(f64::total_cmp);
    a0.dedup();
    Ok((xs, a0))
}

fn mono_point(base: &Base, model: &OutcomeModel, sample: &MatchedSample, xi: f64, alpha0: f64) -> EstimateReport {
    let m = 1.0 - (1.0 + xi) / (1.0 + xi * alpha0);
    let params = SensitivityParams {
        alpha1: 1.0,
        alpha0,
        xi,
    };
    base.adjusted(model, sample, &vec![m; base.targets.len()], false, params)
}

/// Sweep `(xi, alpha0)` on a frozen matched sample and outcome model.
pub fn sweep_monotonicity(
    d: &Dataset,
    sample: &MatchedSample,
    model: &OutcomeModel,
    xi_values: &[f64],
    alpha0_values: &[f64],
) -> Result<SensitivityGrid> {
    let (xs, a0) = check_monotonicity_grid(d, xi_values, alpha0_values)?;
    let base = Base::new(d, sample, model)?;
    let grid: Vec<(f64, f64)> = xs.iter().flat_map(|&x| a0.iter().map(move |&a| (x, a))).collect();
    let points = par_map(grid.len(), |i| mono_point(&base, model, sample, grid[i].0, grid[i].1));
    Ok(SensitivityGrid {
        kind: SensitivityKind::Monotonicity,
        points,
    })
}

/// Settings for re-running the pipeline at each `xi` when the distance
/// depends on the principal score.
#[derive(Debug, Clone)]
pub struct RefitPipeline {
    pub spec: DistanceSpec,
    pub with_replacement: bool,
    pub outcome_features: Vec<usize>,
    pub interactions: bool,
    pub score_features: Vec<usize>,
    pub em: EmOptions,
}

/// Sweep `(xi, alpha0)`, refitting the score model under each `xi`, then
/// rematching and refitting the outcome model.
pub fn sweep_monotonicity_refit(d: &Dataset, pipeline: &RefitPipeline, xi_values: &[f64], alpha0_values: &[f64]) -> Result<SensitivityGrid> {
    let (xs, a0) = check_monotonicity_grid(d, xi_values, alpha0_values)?;
    let per_xi = par_map(xs.len(), |i| -> Result<Vec<EstimateReport>> {
        let xi = xs[i];
        let mut spec = pipeline.spec.clone();
        if spec.score_model.is_some() {
            spec.score_model = Some(fit_em_cpsr(d, xi, &pipeline.score_features, &pipeline.em)?);
        }
        let metric = DistanceMetric::new(d, &spec)?;
        let algorithm = if pipeline.with_replacement { Algorithm::Greedy } else { Algorithm::Optimal };
        let sample = match_with_metric(d, &metric, TargetGroup::UntreatedSurvivors, pipeline.with_replacement, algorithm)?;
        let model = fit_outcome_model(d, &sample, &pipeline.outcome_features, pipeline.interactions)?;
        let base = Base::new(d, &sample, &model)?;
        Ok(a0.iter().map(|&a| mono_point(&base, &model, &sample, xi, a)).collect())
    });
    let mut points = Vec::new();
    for r in per_xi {
        points.extend(r?);
    }
    Ok(SensitivityGrid {
        kind: SensitivityKind::Monotonicity,
        points,
    })
}
