use nalgebra::DMatrix;
use proptest::prelude::*;
use sace_core::data::{Dataset, Role};
use sace_core::estimators::{estimate_regression, fit_outcome_model, OutcomeModel};
use sace_core::matching::*;
use sace_core::principal_score::*;
use sace_core::sensitivity::*;
use sace_core::simulation::{generate_dataset, registered_scenario, PiProLevel, Scenario};

struct Fixture {
    d: Dataset,
    score: PrincipalScoreModel,
    sample: MatchedSample,
}

fn fixture(seed: u64) -> Fixture {
    let mut cfg = registered_scenario(Scenario::A, PiProLevel::High, 3, false, true).unwrap();
    cfg.n = 600;
    let d = generate_dataset(&cfg, seed).unwrap().data;
    let f = principal_score_features(&d);
    let score = fit_em_monotonicity(&d, &f, &EmOptions::default()).unwrap();
    let cols = d.feature_names(&d.role_features(Role::Distance));
    let spec = DistanceSpec::mahalanobis_with_caliper(cols, score.clone(), Caliper::SdMultiple(0.25));
    let sample = match_units(&d, &spec, TargetGroup::UntreatedSurvivors, true, Algorithm::Greedy).unwrap();
    Fixture { d, score, sample }
}

fn model(fx: &Fixture, interactions: bool) -> OutcomeModel {
    fit_outcome_model(&fx.d, &fx.sample, &fx.d.role_features(Role::OutcomeModel), interactions).unwrap()
}

#[test]
fn reference_points_reproduce_the_base_estimate_bitwise() {
    let fx = fixture(11);
    for interactions in [false, true] {
        let m = model(&fx, interactions);
        let base = estimate_regression(&m, &fx.sample, &fx.d).unwrap();
        let ppi = sweep_ppi(&fx.d, &fx.sample, &m, &fx.score, &default_alpha1_grid()).unwrap();
        let p = ppi.points.iter().find(|p| p.params.alpha1 == 1.0).unwrap();
        assert_eq!(p.estimate.to_bits(), base.estimate.to_bits());
        assert_eq!(p.se.to_bits(), base.se.to_bits());

        let upper = xi_bounds_for(&fx.d).unwrap().1;
        let mono = sweep_monotonicity(&fx.d, &fx.sample, &m, &default_xi_grid(upper), &default_alpha0_grid()).unwrap();
        let mut hits = 0;
        for p in mono.points.iter().filter(|p| p.params.xi == 0.0 || p.params.alpha0 == 1.0) {
            assert_eq!(p.estimate.to_bits(), base.estimate.to_bits(), "{:?}", p.params);
            assert_eq!(p.se.to_bits(), base.se.to_bits(), "{:?}", p.params);
            hits += 1;
        }
        assert!(hits > 10);
    }
}

#[test]
fn ppi_sweep_is_flat_when_everyone_treated_is_an_always_survivor() {
    let fx = fixture(12);
    let k = fx.score.covariates.len();
    let mut coef = DMatrix::zeros(3, k + 1);
    coef[(1, 0)] = 60.0;
    let score = PrincipalScoreModel::from_matrix(Variant::Monotonicity, fx.score.covariates.clone(), &coef).unwrap();
    let m = model(&fx, false);
    let g = sweep_ppi(&fx.d, &fx.sample, &m, &score, &default_alpha1_grid()).unwrap();
    for p in &g.points {
        assert_eq!(p.estimate.to_bits(), g.points[0].estimate.to_bits());
    }
}

#[test]
fn xi_outside_the_bounds_is_rejected() {
    let fx = fixture(13);
    let m = model(&fx, false);
    let upper = xi_bounds_for(&fx.d).unwrap().1;
    assert!(sweep_monotonicity(&fx.d, &fx.sample, &m, &[upper + 0.05], &[1.0]).is_err());
    assert!(sweep_monotonicity(&fx.d, &fx.sample, &m, &[0.0], &[0.0]).is_err());
    assert!(sweep_ppi(&fx.d, &fx.sample, &m, &fx.score, &[-1.0]).is_err());
}

#[test]
fn grid_csv_has_one_row_per_point() {
    let fx = fixture(14);
    let m = model(&fx, false);
    let g = sweep_monotonicity(&fx.d, &fx.sample, &m, &[0.0, 0.1], &[0.5, 1.0, 2.0]).unwrap();
    let mut buf = Vec::new();
    g.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "xi,alpha0,estimate,se,ci_lo,ci_hi");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,0.5,"));
}

#[test]
fn refit_sweep_at_zero_xi_matches_the_frozen_pipeline() {
    let fx = fixture(15);
    let features = principal_score_features(&fx.d);
    let cols = fx.d.feature_names(&fx.d.role_features(Role::Distance));
    let pipeline = RefitPipeline {
        spec: DistanceSpec::mahalanobis_with_caliper(cols, fx.score.clone(), Caliper::SdMultiple(0.25)),
        with_replacement: true,
        outcome_features: fx.d.role_features(Role::OutcomeModel),
        interactions: false,
        score_features: features,
        em: EmOptions::default(),
    };
    let refit = sweep_monotonicity_refit(&fx.d, &pipeline, &[0.0, 0.2], &[1.0, 1.5]).unwrap();
    assert_eq!(refit.points.len(), 4);
    let base = estimate_regression(&model(&fx, false), &fx.sample, &fx.d).unwrap();
    let p = refit.point(sace_core::estimators::SensitivityParams { alpha1: 1.0, alpha0: 1.0, xi: 0.0 }).unwrap();
    assert!((p.estimate - base.estimate).abs() < 1e-6, "{} vs {}", p.estimate, base.estimate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // Adjustments scale the modelled control mean by a factor that moves
    // monotonically with alpha0 once xi > 0.
    #[test]
    fn monotonicity_adjustment_is_monotone_in_alpha0(xi in 0.05f64..0.3, a in 0.3f64..3.0, b in 0.3f64..3.0) {
        let fx = fixture_cached();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let g = sweep_monotonicity(&fx.0.d, &fx.0.sample, &fx.1, &[xi], &[lo, hi]).unwrap();
        let mu0: f64 = fx.2;
        let (e_lo, e_hi) = (g.points[0].estimate, g.points[1].estimate);
        if mu0 > 0.0 { prop_assert!(e_hi > e_lo) } else { prop_assert!(e_hi < e_lo) }
    }
}

fn fixture_cached() -> &'static (Fixture, OutcomeModel, f64) {
    static CELL: std::sync::OnceLock<(Fixture, OutcomeModel, f64)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let fx = fixture(16);
        let m = model(&fx, false);
        let features = m.covariates.iter().map(|c| fx.d.feature_index(c).unwrap()).collect::<Vec<_>>();
        let mu0 = fx
            .sample
            .pairs
            .iter()
            .map(|p| {
                let x: Vec<f64> = features.iter().map(|&j| fx.d.unit(p.target).feature(j)).collect();
                m.predict(0, &x)
            })
            .sum::<f64>()
            / fx.sample.pairs.len() as f64;
        (fx, m, mu0)
    })
}
