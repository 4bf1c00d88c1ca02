//! Browser bindings over the bundled NSW example. Every export returns a
//! JSON string; errors surface as JS exceptions.

use std::cell::RefCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sace_core::data::{nsw, Dataset, Role};
use sace_core::estimators::{
    estimate_bias_corrected, estimate_crude, estimate_regression, fit_arm_regression, fit_outcome_model, EstimateReport,
};
use sace_core::matching::{match_with_metric, Algorithm, Caliper, DistanceMetric, DistanceSpec, MatchedSample, TargetGroup};
use sace_core::principal_score::{fit_em_monotonicity, principal_score_features, strata_proportions, xi_bounds, EmOptions, PrincipalScoreModel};
use sace_core::sensitivity::{default_alpha1_grid, sweep_ppi};

struct Fitted {
    d: Dataset,
    score: PrincipalScoreModel,
}

thread_local! {
    static NSW: RefCell<Option<std::rc::Rc<Fitted>>> = const { RefCell::new(None) };
}

/// The NSW data with its monotonicity score model, fitted on first use.
fn fitted() -> Result<std::rc::Rc<Fitted>, String> {
    NSW.with(|cell| {
        if let Some(f) = cell.borrow().as_ref() {
            return Ok(f.clone());
        }
        let d = nsw::dataset();
        let score = fit_em_monotonicity(&d, &principal_score_features(&d), &EmOptions::default()).map_err(|e| e.to_string())?;
        let f = std::rc::Rc::new(Fitted { d, score });
        *cell.borrow_mut() = Some(f.clone());
        Ok(f)
    })
}

fn matched(f: &Fitted, caliper_sd: f64, replace: bool) -> Result<(DistanceMetric, MatchedSample), String> {
    let cols = f.d.feature_names(&f.d.role_features(Role::Distance));
    let spec = DistanceSpec::mahalanobis_with_caliper(cols, f.score.clone(), Caliper::SdMultiple(caliper_sd));
    let metric = DistanceMetric::new(&f.d, &spec).map_err(|e| e.to_string())?;
    let algorithm = if replace { Algorithm::Greedy } else { Algorithm::Optimal };
    let sample = match_with_metric(&f.d, &metric, TargetGroup::UntreatedSurvivors, replace, algorithm).map_err(|e| e.to_string())?;
    Ok((metric, sample))
}

#[derive(Serialize)]
struct Strata {
    xi_lo: f64,
    xi_hi: f64,
    pi_as: f64,
    pi_har: f64,
    pi_pro: f64,
    pi_ns: f64,
}

/// Stratum shares and the admissible `xi` range for survival rates `p0`, `p1`.
pub fn strata_json(p0: f64, p1: f64, xi: f64) -> Result<String, String> {
    let (lo, hi) = xi_bounds(p0, p1).map_err(|e| e.to_string())?;
    let s = strata_proportions(p0, p1, xi).map_err(|e| e.to_string())?;
    let out = Strata {
        xi_lo: lo,
        xi_hi: hi,
        pi_as: s.pi_as,
        pi_har: s.pi_har,
        pi_pro: s.pi_pro,
        pi_ns: s.pi_ns,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Estimates {
    n_pairs: usize,
    n_unmatched: usize,
    distinct_donors: usize,
    reports: Vec<EstimateReport>,
}

/// Crude, regression and interacted regression estimates, plus bias-corrected
/// when matching with replacement.
pub fn estimates_json(caliper_sd: f64, replace: bool) -> Result<String, String> {
    let f = fitted()?;
    let (metric, s) = matched(&f, caliper_sd, replace)?;
    let feats = f.d.role_features(Role::OutcomeModel);
    let go = || -> sace_core::Result<Vec<EstimateReport>> {
        let mut r = vec![
            estimate_crude(&s, &f.d, &metric)?,
            estimate_regression(&fit_outcome_model(&f.d, &s, &feats, false)?, &s, &f.d)?,
            estimate_regression(&fit_outcome_model(&f.d, &s, &feats, true)?, &s, &f.d)?,
        ];
        // Bias correction is defined for matching with replacement only.
        if replace {
            r.push(estimate_bias_corrected(&s, &f.d, &metric, &fit_arm_regression(&f.d, true, &feats)?)?);
        }
        Ok(r)
    };
    let out = Estimates {
        n_pairs: s.n_pairs(),
        n_unmatched: s.unmatched_targets.len(),
        distinct_donors: s.reuse.len(),
        reports: go().map_err(|e| e.to_string())?,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Regression estimate across the default `alpha1` grid.
pub fn ppi_curve_json(caliper_sd: f64, replace: bool, interactions: bool) -> Result<String, String> {
    let f = fitted()?;
    let (_, s) = matched(&f, caliper_sd, replace)?;
    let model = fit_outcome_model(&f.d, &s, &f.d.role_features(Role::OutcomeModel), interactions).map_err(|e| e.to_string())?;
    let grid = sweep_ppi(&f.d, &s, &model, &f.score, &default_alpha1_grid()).map_err(|e| e.to_string())?;
    serde_json::to_string(&grid.points).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn strata(p0: f64, p1: f64, xi: f64) -> Result<String, JsError> {
    strata_json(p0, p1, xi).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn nsw_estimates(caliper_sd: f64, replace: bool) -> Result<String, JsError> {
    estimates_json(caliper_sd, replace).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn nsw_ppi_curve(caliper_sd: f64, replace: bool, interactions: bool) -> Result<String, JsError> {
    ppi_curve_json(caliper_sd, replace, interactions).map_err(|e| JsError::new(&e))
}
