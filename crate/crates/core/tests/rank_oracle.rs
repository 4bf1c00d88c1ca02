mod common;

use proptest::prelude::*;
use sace_core::matching::*;
use sace_core::rank_tests::*;

fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn p_from(stats: &[f64], observed: f64, alt: Alternative) -> f64 {
    let n = stats.len() as f64;
    let up = stats.iter().filter(|&&t| t >= observed - 1e-9).count() as f64 / n;
    let lo = stats.iter().filter(|&&t| t <= observed + 1e-9).count() as f64 / n;
    match alt {
        Alternative::Greater => up,
        Alternative::Less => lo,
        Alternative::TwoSided => (2.0 * up.min(lo)).min(1.0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn wilcoxon_exact_matches_sign_flip_enumeration(pairs in prop::collection::vec((-4i32..5, -4i32..5), 1..=8)) {
        let pairs: Vec<(f64, f64)> = pairs.into_iter().map(|(a, b)| (a as f64, b as f64)).collect();
        let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
        prop_assume!(!diffs.is_empty());
        let r = ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let w: f64 = r.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
        let n = diffs.len();
        let all: Vec<f64> = (0..1u32 << n)
            .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum())
            .collect();
        for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
            let rep = wilcoxon_signed_rank(&pairs, alt).unwrap();
            prop_assert_eq!(rep.method, TestMethod::Exact);
            prop_assert!((rep.statistic - w).abs() < 1e-12);
            let p = p_from(&all, w, alt);
            prop_assert!((rep.p_value - p).abs() < 1e-12, "{:?}: {} vs {}", alt, rep.p_value, p);
        }
    }
}

/// Every within-group relabelling of treated units, enumerated directly.
fn aligned_oracle(groups: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
    let aligned: Vec<f64> = groups
        .iter()
        .flat_map(|(y, _)| {
            let c = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(move |v| v - c)
        })
        .collect();
    let r = ranks(&aligned);
    let mut offset = 0;
    let mut dist = vec![0.0];
    let mut observed = 0.0;
    for (y, treated_pos) in groups {
        let g = &r[offset..offset + y.len()];
        observed += g[*treated_pos];
        dist = dist.iter().flat_map(|s| g.iter().map(move |v| s + v)).collect();
        offset += y.len();
    }
    (observed, dist)
}

/// One treated donor per cluster with `sizes[g]` untreated units near it.
fn grouped_sample(sizes: &[usize], outcomes: &[f64]) -> (sace_core::data::Dataset, MatchedSample) {
    let mut rows = Vec::new();
    let mut k = 0;
    for (g, &s) in sizes.iter().enumerate() {
        let centre = 10.0 * g as f64;
        rows.push((true, vec![centre], outcomes[k]));
        k += 1;
        for t in 0..s {
            rows.push((false, vec![centre + 0.1 * (t + 1) as f64], outcomes[k]));
            k += 1;
        }
    }
    let d = common::survivors(&rows, &["x1"]);
    let s = match_units(&d, &DistanceSpec::mahalanobis(vec!["x1".into()]), TargetGroup::UntreatedSurvivors, true, Algorithm::Greedy).unwrap();
    (d, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aligned_rank_exact_matches_enumeration(
        sizes in prop::collection::vec(1usize..=3, 2..=4),
        ys in prop::collection::vec(-5i32..6, 16),
    ) {
        let outcomes: Vec<f64> = ys.iter().map(|&v| v as f64).collect();
        let (d, s) = grouped_sample(&sizes, &outcomes);
        let groups: Vec<(Vec<f64>, usize)> = s
            .reuse
            .keys()
            .map(|&donor| {
                let mut y = vec![d.unit(donor).outcome()];
                y.extend(s.pairs.iter().filter(|p| p.donor == donor).map(|p| d.unit(p.target).outcome()));
                (y, 0)
            })
            .collect();
        let (obs, dist) = aligned_oracle(&groups);
        let mean = dist.iter().sum::<f64>() / dist.len() as f64;
        let p = dist.iter().filter(|t| (*t - mean).abs() >= (obs - mean).abs() - 1e-9).count() as f64 / dist.len() as f64;
        let rep = aligned_rank(&s, &d, &AlignedRankOptions { method: PermutationMethod::Exact, ..Default::default() }).unwrap();
        prop_assert!((rep.statistic - obs).abs() < 1e-9, "{} vs {}", rep.statistic, obs);
        prop_assert!((rep.p_value - p).abs() < 1e-12, "{} vs {}", rep.p_value, p);
    }
}

#[test]
fn monte_carlo_agrees_with_exact() {
    let (d, s) = grouped_sample(&[1, 1, 1], &[3.0, 1.0, 2.0, 5.0, 4.0, 0.5]);
    let exact = aligned_rank(&s, &d, &AlignedRankOptions { method: PermutationMethod::Exact, ..Default::default() }).unwrap();
    let n_perm = 20_000;
    let mc = aligned_rank(&s, &d, &AlignedRankOptions { method: PermutationMethod::MonteCarlo, n_perm, seed: 5 }).unwrap();
    let se = (exact.p_value * (1.0 - exact.p_value) / n_perm as f64).sqrt();
    assert!((mc.p_value - exact.p_value).abs() <= 3.0 * se + 1e-12, "{} vs {}", mc.p_value, exact.p_value);
    let again = aligned_rank(&s, &d, &AlignedRankOptions { method: PermutationMethod::MonteCarlo, n_perm, seed: 5 }).unwrap();
    assert_eq!(mc, again);
}
