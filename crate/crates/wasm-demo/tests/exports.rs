use sace_wasm_demo::{estimates_json, ppi_curve_json, strata_json};
use serde_json::Value;

#[test]
fn strata_reports_bounds_and_shares() {
    let v: Value = serde_json::from_str(&strata_json(0.6965, 0.7744, 0.0).unwrap()).unwrap();
    assert!((v["xi_hi"].as_f64().unwrap() - 0.479).abs() < 0.01);
    let total: f64 = ["pi_as", "pi_har", "pi_pro", "pi_ns"].iter().map(|k| v[k].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(strata_json(0.6965, 0.7744, 0.9).is_err());
}

#[test]
fn estimates_and_curve_agree_at_alpha_one() {
    let est: Value = serde_json::from_str(&estimates_json(0.3, true).unwrap()).unwrap();
    let reports = est["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    let wls = reports[1]["estimate"].as_f64().unwrap();
    let curve: Value = serde_json::from_str(&ppi_curve_json(0.3, true, false).unwrap()).unwrap();
    let at_one = curve.as_array().unwrap().iter().find(|p| p["params"]["alpha1"] == 1.0).unwrap();
    assert_eq!(at_one["estimate"].as_f64().unwrap(), wls);
}

#[test]
fn without_replacement_drops_bias_correction() {
    let est: Value = serde_json::from_str(&estimates_json(0.3, false).unwrap()).unwrap();
    assert_eq!(est["reports"].as_array().unwrap().len(), 3);
    assert!(est["n_pairs"].as_u64().unwrap() <= 230);
}
