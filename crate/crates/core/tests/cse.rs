use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sace_core::data::{ColumnKind, ColumnMeta, Dataset, Role, Schema, UnitRecord};
use sace_core::estimators::*;
use sace_core::matching::*;

fn schema() -> Schema {
    let col = |name: &str, roles: Vec<Role>| ColumnMeta {
        name: name.into(),
        kind: ColumnKind::Continuous,
        roles,
    };
    Schema {
        id: Some("id".into()),
        treatment: "a".into(),
        survival: "s".into(),
        outcome: "y".into(),
        columns: vec![
            col("age", vec![Role::Distance, Role::OutcomeModel]),
            col("dose", vec![Role::PostTreatment, Role::Distance]),
        ],
    }
}

/// `effect` acts on the outcome directly and `shift` moves the post-treatment
/// covariate under treatment.
fn generate(seed: u64, n: usize, effect: f64, shift: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..n)
        .map(|i| {
            let treated = rng.random_bool(0.5);
            let a = treated as u8 as f64;
            let x0: f64 = rng.sample(StandardNormal);
            let x1 = x0 + shift * a + 0.5 * rng.sample::<f64, _>(StandardNormal);
            let p = 1.0 / (1.0 + (-(0.5 + x0 + 0.5 * a)).exp());
            let survived = rng.random_bool(p);
            let y = 1.0 + x0 + x1 + effect * a + rng.sample::<f64, _>(StandardNormal);
            UnitRecord {
                id: i as u64,
                x0: vec![x0],
                x1: vec![x1],
                treated,
                survived,
                y: survived.then_some(y),
            }
        })
        .collect();
    Dataset::new(units, schema()).unwrap()
}

fn flip(d: &Dataset) -> Dataset {
    let units = d
        .units()
        .iter()
        .map(|u| UnitRecord {
            treated: !u.treated,
            ..u.clone()
        })
        .collect();
    Dataset::new(units, d.schema().clone()).unwrap()
}

fn both() -> DistanceSpec {
    DistanceSpec::mahalanobis(vec!["age".into(), "dose".into()])
}

#[test]
fn baseline_only_matching_reduces_to_the_crude_contrast() {
    let d = generate(1, 400, 1.0, 0.5);
    let spec = DistanceSpec::mahalanobis(vec!["age".into()]);
    let cse = estimate_cse(&d, 0, &spec, CseEstimator::Crude, true).unwrap();
    let metric = DistanceMetric::new(&d, &spec).unwrap();
    let s = match_with_metric(&d, &metric, TargetGroup::UntreatedSurvivors, true, Algorithm::Greedy).unwrap();
    let crude = estimate_crude(&s, &d, &metric).unwrap();
    assert_eq!(cse.estimate.to_bits(), crude.estimate.to_bits());
    assert_eq!(cse.se.to_bits(), crude.se.to_bits());
    assert_eq!(cse.estimator, EstimatorTag::Cse { a_s: 0 });
}

#[test]
fn relabelling_the_arms_flips_the_sign() {
    let d = generate(2, 300, 0.8, 0.3);
    let f = flip(&d);
    for (est, replace) in [(CseEstimator::Crude, true), (CseEstimator::Crude, false), (CseEstimator::Regression, true)] {
        for a_s in [0, 1] {
            let x = estimate_cse(&d, a_s, &both(), est, replace).unwrap();
            let y = estimate_cse(&f, 1 - a_s, &both(), est, replace).unwrap();
            assert!((x.estimate + y.estimate).abs() < 1e-9, "{est:?} {a_s}: {} vs {}", x.estimate, y.estimate);
            assert!((x.se - y.se).abs() < 1e-9);
        }
    }
}

#[test]
fn null_effect_is_centred_on_zero() {
    let reps = 30;
    for est in [CseEstimator::Crude, CseEstimator::Regression, CseEstimator::RegressionInteractions] {
        let reports: Vec<EstimateReport> = (0..reps)
            .map(|r| estimate_cse(&generate(100 + r, 600, 0.0, 0.0), 1, &both(), est, true).unwrap())
            .collect();
        let m = reports.iter().map(|r| r.estimate).sum::<f64>() / reps as f64;
        let spread = (reports.iter().map(|r| (r.estimate - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(m.abs() < 3.0 * spread / (reps as f64).sqrt() + 0.02, "{est:?}: mean {m}, sd {spread}");
        let covered = reports.iter().filter(|r| r.covers(0.0)).count();
        assert!(covered as f64 >= 0.8 * reps as f64, "{est:?}: {covered}/{reps}");
    }
}

#[test]
fn regression_recovers_the_direct_effect() {
    let d = generate(3, 4000, 1.5, 0.7);
    let r = estimate_cse(&d, 0, &both(), CseEstimator::Regression, true).unwrap();
    assert!((r.estimate - 1.5).abs() < 4.0 * r.se, "{} ± {}", r.estimate, r.se);
}

#[test]
fn missing_post_treatment_columns_are_rejected() {
    let d = sace_core::data::nsw::dataset();
    let spec = DistanceSpec::mahalanobis(vec!["age".into()]);
    assert!(estimate_cse(&d, 0, &spec, CseEstimator::Crude, true).is_err());
}
