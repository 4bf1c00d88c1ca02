use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use sace_core::data::{crosstab_survival, survival_rates, Dataset, Role};
use sace_core::estimators::{
    estimate_bias_corrected, estimate_crude, estimate_composite, estimate_naive, estimate_regression, estimate_weighting,
    fit_arm_regression, fit_outcome_model, write_reports_csv, BootstrapOptions, EstimateReport,
};
use sace_core::matching::{
    balance_table_matched, balance_table_raw, match_with_metric, write_balance_csv, Algorithm, Caliper, DistanceKind, DistanceMetric,
    DistanceSpec, MatchedSample, TargetGroup,
};
use sace_core::principal_score::{
    fit_em_cpsr, fit_em_monotonicity, principal_score_features, strata_proportions, xi_bounds_for, EmOptions, PrincipalScoreModel,
};
use sace_core::rank_tests::{aligned_rank, outcome_pairs, wilcoxon_signed_rank, AlignedRankOptions, Alternative, PermutationMethod};
use sace_core::sensitivity::{default_xi_grid, sweep_monotonicity, sweep_monotonicity_refit, sweep_ppi, RefitPipeline};
use sace_core::simulation::{registered_scenario, run_scenario, PiProLevel, Scenario, SimEstimator, SimMatching};

use crate::args::{require_seed, AlgorithmArg, DataArgs, DistanceArg, EstimatorArg, MatchArgs, PiProArg, ScenarioArg, SensitivityMode};
use crate::output::{create, is_json, sidecar, write_manifest, write_string};
use crate::Command;

const TARGET: TargetGroup = TargetGroup::UntreatedSurvivors;

pub fn dispatch(cmd: &Command, threads: Option<usize>) -> Result<()> {
    let (out, seed, outputs) = match cmd {
        Command::Em {
            data,
            xi,
            starts,
            seed,
            max_iter,
            tol,
            out,
        } => {
            let seed = if *starts > 0 { Some(require_seed(*seed, "with --starts")?) } else { *seed };
            let opts = EmOptions {
                tol: *tol,
                max_iter: *max_iter,
                extra_starts: *starts,
                seed: seed.unwrap_or(0),
                ..EmOptions::default()
            };
            em(data, *xi, &opts, out)?;
            (out, seed, vec![out.clone()])
        }
        Command::Match { data, matching, out } => {
            let d = data.load()?;
            let m = Matching::run(&d, matching)?;
            m.sample.write_csv(&d, create(out)?)?;
            println!("{} pairs, {} unmatched targets, {} distinct donors", m.sample.n_pairs(), m.sample.unmatched_targets.len(), m.sample.reuse.len());
            (out, None, vec![out.clone()])
        }
        Command::Balance { data, matching, out } => {
            let d = data.load()?;
            let m = Matching::run(&d, matching)?;
            let f = d.role_features(Role::Balance);
            let raw_path = sidecar(out, ".raw.csv");
            let raw = balance_table_raw(&d, &f, &d.survivors(true), &d.survivors(false))?;
            write_balance_csv(&raw, create(&raw_path)?)?;
            let matched = balance_table_matched(&d, &f, &m.sample)?;
            write_balance_csv(&matched, create(out)?)?;
            println!("{:<16} {:>10} {:>10}", "covariate", "SMD raw", "SMD match");
            for (r, b) in raw.iter().zip(&matched) {
                println!("{:<16} {:>10.3} {:>10.3}", r.covariate, r.smd, b.smd);
            }
            (out, None, vec![out.clone(), raw_path])
        }
        Command::Estimate {
            data,
            matching,
            estimators,
            balance,
            rank_tests,
            n_boot,
            n_perm,
            seed,
            out,
        } => {
            let needs_seed = estimators.contains(&EstimatorArg::Weighting) || rank_tests.is_some();
            let seed = if needs_seed { Some(require_seed(*seed, "for weighting and rank tests")?) } else { *seed };
            let d = data.load()?;
            let matched = if estimators.iter().any(|e| e.needs_matching()) || balance.is_some() || rank_tests.is_some() {
                Some(Matching::run(&d, matching)?)
            } else {
                None
            };
            let mut reports = Vec::new();
            for &e in estimators {
                reports.push(estimate(&d, e, matched.as_ref(), matching, *n_boot, seed.unwrap_or(0))?);
            }
            if is_json(out) {
                write_string(out, &serde_json::to_string_pretty(&reports)?)?;
            } else {
                write_reports_csv(&reports, create(out)?)?;
            }
            print_reports(&reports);
            let mut outputs = vec![out.clone()];
            if let (Some(path), Some(m)) = (balance, &matched) {
                let rows = balance_table_matched(&d, &d.role_features(Role::Balance), &m.sample)?;
                write_balance_csv(&rows, create(path)?)?;
                outputs.push(path.clone());
            }
            if let (Some(path), Some(m)) = (rank_tests, &matched) {
                let w = wilcoxon_signed_rank(&outcome_pairs(&m.sample, &d), Alternative::TwoSided)?;
                let opts = AlignedRankOptions {
                    n_perm: *n_perm,
                    seed: seed.unwrap_or(0),
                    method: PermutationMethod::Auto,
                };
                let a = aligned_rank(&m.sample, &d, &opts)?;
                println!("wilcoxon p = {:.4}, aligned-rank p = {:.4}", w.p_value, a.p_value);
                write_string(path, &serde_json::to_string_pretty(&[w, a])?)?;
                outputs.push(path.clone());
            }
            (out, seed, outputs)
        }
        Command::Sensitivity { mode } => {
            let out = sensitivity(mode)?;
            (out, None, vec![out.clone()])
        }
        Command::Simulate {
            scenario,
            k,
            pi_pro,
            interactions,
            misspecified,
            n,
            reps,
            seed,
            estimators,
            distance,
            caliper_sd,
            no_replace,
            out,
        } => {
            let seed = require_seed(*seed, "for simulate")?;
            let scenario = match scenario {
                ScenarioArg::A => Scenario::A,
                ScenarioArg::B => Scenario::B,
            };
            let level = match pi_pro {
                PiProArg::High => PiProLevel::High,
                PiProArg::Low => PiProLevel::Low,
            };
            let mut cfg = registered_scenario(scenario, level, *k, *misspecified, *interactions)?;
            cfg.n = *n;
            cfg.reps = *reps;
            cfg.seed = seed;
            let kind = distance_kind(*distance);
            let score_based = matches!(kind, DistanceKind::MahalanobisWithCaliper | DistanceKind::PiTildeAbsDiff);
            let sim_matching = SimMatching {
                kind,
                caliper_sd: score_based.then_some(*caliper_sd),
                with_replacement: !no_replace,
            };
            let menu: Vec<SimEstimator> = estimators.iter().map(|&e| sim_estimator(e)).collect();
            let summary = run_scenario(&cfg, &menu, &sim_matching, &EmOptions::default())?;
            summary.write_csv(create(out)?)?;
            println!("true SACE {:.4}; {} of {} replicates used", summary.truth, summary.reps - summary.failed_replicates, summary.reps);
            println!("{:<24} {:>9} {:>9} {:>9} {:>9} {:>6}", "estimator", "Mean", "Emp.SD", "Est.SE", "MSE", "CP95");
            for r in &summary.rows {
                println!(
                    "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>6.3}",
                    r.estimator.tag(),
                    r.mean,
                    r.emp_sd,
                    r.est_se,
                    r.mse,
                    r.cp95
                );
            }
            (out, Some(seed), vec![out.clone()])
        }
    };
    write_manifest(out, cmd, threads, seed, &outputs)
}

fn em(data: &DataArgs, xi: Option<f64>, opts: &EmOptions, out: &Path) -> Result<()> {
    let d = data.load()?;
    let features = principal_score_features(&d);
    let (lo, hi) = xi_bounds_for(&d)?;
    let model = match xi {
        Some(x) => {
            check_xi(x, lo, hi)?;
            fit_em_cpsr(&d, x, &features, opts)?
        }
        None => fit_em_monotonicity(&d, &features, opts)?,
    };
    write_string(out, &model.to_json()?)?;
    let t = crosstab_survival(&d);
    let (p0, p1) = survival_rates(&d)?;
    let s = strata_proportions(p0, p1, xi.unwrap_or(0.0))?.rounded(2);
    println!("cells (A,S): (0,0)={} (0,1)={} (1,0)={} (1,1)={}", t.count(0, 0), t.count(0, 1), t.count(1, 0), t.count(1, 1));
    println!("strata as={} har={} pro={} ns={}", s.pi_as, s.pi_har, s.pi_pro, s.pi_ns);
    println!("xi bounds [{lo:.4}, {hi:.4}]");
    println!(
        "EM {} after {} iterations, log-likelihood {:.4}",
        if model.converged { "converged" } else { "stopped" },
        model.iterations,
        model.loglik
    );
    if !model.m_step_converged {
        eprintln!("warning: final M-step did not converge (possible separation)");
    }
    Ok(())
}

fn check_xi(x: f64, lo: f64, hi: f64) -> Result<()> {
    if !(x >= lo && x <= hi) {
        bail!("xi = {x} is outside the identified bounds [{lo:.2}, {hi:.2}]");
    }
    Ok(())
}

fn distance_kind(d: DistanceArg) -> DistanceKind {
    match d {
        DistanceArg::Mahalanobis => DistanceKind::Mahalanobis,
        DistanceArg::MahalanobisCaliper => DistanceKind::MahalanobisWithCaliper,
        DistanceArg::PiTilde => DistanceKind::PiTildeAbsDiff,
        DistanceArg::Exact => DistanceKind::Exact,
    }
}

fn sim_estimator(e: EstimatorArg) -> SimEstimator {
    match e {
        EstimatorArg::Crude => SimEstimator::Crude,
        EstimatorArg::Wls => SimEstimator::Regression,
        EstimatorArg::WlsI => SimEstimator::RegressionInteractions,
        EstimatorArg::Bc => SimEstimator::BiasCorrected,
        EstimatorArg::Naive => SimEstimator::Naive,
        EstimatorArg::Composite => SimEstimator::Composite,
        EstimatorArg::Weighting => SimEstimator::Weighting,
    }
}

fn load_or_fit_score(d: &Dataset, args: &MatchArgs) -> Result<PrincipalScoreModel> {
    match &args.model {
        Some(path) => {
            let s = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            PrincipalScoreModel::from_json(&s).with_context(|| format!("parsing {}", path.display()))
        }
        None => Ok(fit_em_monotonicity(d, &principal_score_features(d), &EmOptions::default())?),
    }
}

struct Matching {
    score: Option<PrincipalScoreModel>,
    spec: DistanceSpec,
    metric: DistanceMetric,
    sample: MatchedSample,
    replace: bool,
}

impl Matching {
    fn run(d: &Dataset, args: &MatchArgs) -> Result<Matching> {
        let columns = args.columns(d);
        let caliper = match (args.caliper_sd, args.caliper) {
            (Some(c), _) => Some(Caliper::SdMultiple(c)),
            (None, Some(c)) => Some(Caliper::Absolute(c)),
            (None, None) => None,
        };
        let score = match args.distance {
            DistanceArg::MahalanobisCaliper | DistanceArg::PiTilde => Some(load_or_fit_score(d, args)?),
            DistanceArg::Mahalanobis | DistanceArg::Exact => args.model.as_ref().map(|_| load_or_fit_score(d, args)).transpose()?,
        };
        let spec = match args.distance {
            DistanceArg::Mahalanobis => DistanceSpec::mahalanobis(columns),
            DistanceArg::Exact => DistanceSpec::exact(columns),
            DistanceArg::PiTilde => DistanceSpec {
                caliper,
                ..DistanceSpec::pi_tilde(score.clone().expect("fitted above"))
            },
            DistanceArg::MahalanobisCaliper => {
                let c = caliper.context("mahalanobis-caliper needs --caliper-sd or --caliper")?;
                DistanceSpec::mahalanobis_with_caliper(columns, score.clone().expect("fitted above"), c)
            }
        };
        let metric = DistanceMetric::new(d, &spec)?;
        let algorithm = match args.algorithm {
            AlgorithmArg::Greedy => Algorithm::Greedy,
            AlgorithmArg::Optimal => Algorithm::Optimal,
        };
        let sample = match_with_metric(d, &metric, TARGET, args.replace, algorithm)?;
        Ok(Matching {
            score,
            spec,
            metric,
            sample,
            replace: args.replace,
        })
    }

    fn score(&mut self, d: &Dataset, args: &MatchArgs) -> Result<&PrincipalScoreModel> {
        if self.score.is_none() {
            self.score = Some(load_or_fit_score(d, args)?);
        }
        Ok(self.score.as_ref().expect("set above"))
    }
}

fn estimate(d: &Dataset, e: EstimatorArg, m: Option<&Matching>, args: &MatchArgs, n_boot: usize, seed: u64) -> Result<EstimateReport> {
    let f = d.role_features(Role::OutcomeModel);
    let need = || m.context("matching estimators need a matched sample");
    Ok(match e {
        EstimatorArg::Naive => estimate_naive(d)?,
        EstimatorArg::Composite => estimate_composite(d)?,
        EstimatorArg::Weighting => {
            let score = match m.and_then(|m| m.score.clone()) {
                Some(s) => s,
                None => load_or_fit_score(d, args)?,
            };
            let opts = BootstrapOptions {
                n_boot,
                seed,
                ..BootstrapOptions::default()
            };
            estimate_weighting(d, &score, &opts)?
        }
        EstimatorArg::Crude => {
            let m = need()?;
            estimate_crude(&m.sample, d, &m.metric)?
        }
        EstimatorArg::Wls | EstimatorArg::WlsI => {
            let m = need()?;
            let model = fit_outcome_model(d, &m.sample, &f, e == EstimatorArg::WlsI)?;
            estimate_regression(&model, &m.sample, d)?
        }
        EstimatorArg::Bc => {
            let m = need()?;
            let mu = fit_arm_regression(d, !TARGET.treated(), &f)?;
            estimate_bias_corrected(&m.sample, d, &m.metric, &mu)?
        }
    })
}

fn print_reports(reports: &[EstimateReport]) {
    let mut w = std::io::stdout().lock();
    let _ = writeln!(w, "{:<24} {:>12} {:>12} {:>26}", "estimator", "estimate", "se", "95% CI");
    for r in reports {
        let ci = format!("({:.2}, {:.2})", r.ci95.0, r.ci95.1);
        let _ = writeln!(w, "{:<24} {:>12.2} {:>12.2} {:>26}", r.estimator.to_string(), r.estimate, r.se, ci);
    }
}

fn sensitivity(mode: &SensitivityMode) -> Result<&PathBuf> {
    match mode {
        SensitivityMode::Ppi {
            data,
            matching,
            alpha1,
            interactions,
            out,
        } => {
            let d = data.load()?;
            let mut m = Matching::run(&d, matching)?;
            let model = fit_outcome_model(&d, &m.sample, &d.role_features(Role::OutcomeModel), *interactions)?;
            let sample = m.sample.clone();
            let score = m.score(&d, matching)?;
            let grid = sweep_ppi(&d, &sample, &model, score, &alpha1.0)?;
            grid.write_csv(create(out)?)?;
            println!("{:>7} {:>12} {:>12}", "alpha1", "estimate", "se");
            for p in &grid.points {
                println!("{:>7} {:>12.2} {:>12.2}", p.params.alpha1, p.estimate, p.se);
            }
            Ok(out)
        }
        SensitivityMode::Mono {
            data,
            matching,
            xi,
            alpha0,
            interactions,
            refit,
            out,
        } => {
            let d = data.load()?;
            let (lo, hi) = xi_bounds_for(&d)?;
            let xs = match xi {
                Some(g) => g.0.clone(),
                None => default_xi_grid(hi),
            };
            for &x in &xs {
                check_xi(x, lo, hi)?;
            }
            let m = Matching::run(&d, matching)?;
            let f = d.role_features(Role::OutcomeModel);
            let grid = if *refit {
                let pipeline = RefitPipeline {
                    spec: m.spec.clone(),
                    with_replacement: m.replace,
                    outcome_features: f,
                    interactions: *interactions,
                    score_features: principal_score_features(&d),
                    em: EmOptions::default(),
                };
                sweep_monotonicity_refit(&d, &pipeline, &xs, &alpha0.0)?
            } else {
                let model = fit_outcome_model(&d, &m.sample, &f, *interactions)?;
                sweep_monotonicity(&d, &m.sample, &model, &xs, &alpha0.0)?
            };
            grid.write_csv(create(out)?)?;
            println!("{} grid points written to {}", grid.points.len(), out.display());
            Ok(out)
        }
    }
}
