//! Principal scores: the probability of each principal stratum given the
//! pre-treatment covariates, fitted by EM over the latent stratum labels.
//!
//! Two parameterizations are supported. Under monotonicity the harmed stratum
//! is empty and the model is a three-category logit over (pro, as, ns) with
//! `pro` as the reference. Under a constant harmed/always-survivor ratio `xi`
//! the always-survivors and the harmed are pooled into `ah` (the reference)
//! and split deterministically: `as = ah / (1 + xi)`, `har = xi * ah / (1 + xi)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{survival_rates, Dataset, Role};
use crate::error::{Error, Result};
use crate::linalg::Design;
use crate::multinomial::{fit_weighted_multinomial, softmax, NewtonOptions};

const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Monotonicity,
    Cpsr { xi: f64 },
}

impl Variant {
    pub fn xi(&self) -> f64 {
        match self {
            Variant::Monotonicity => 0.0,
            Variant::Cpsr { xi } => *xi,
        }
    }

    /// Names of the non-reference categories, in coefficient-row order.
    fn free_strata(&self) -> [&'static str; 2] {
        match self {
            Variant::Monotonicity => ["as", "ns"],
            Variant::Cpsr { .. } => ["pro", "ns"],
        }
    }

    fn reference(&self) -> &'static str {
        match self {
            Variant::Monotonicity => "pro",
            Variant::Cpsr { .. } => "ah",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCoefficients {
    pub stratum: String,
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// Stratum membership probabilities at one covariate value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumProbs {
    pub as_: f64,
    pub pro: f64,
    pub har: f64,
    pub ns: f64,
}

impl StratumProbs {
    pub fn sum(&self) -> f64 {
        self.as_ + self.pro + self.har + self.ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiTilde {
    /// Share of always-survivors among units that survive under treatment.
    pub pi1_as: f64,
    /// Share of always-survivors among units that survive under control.
    pub pi0_as: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalScoreModel {
    pub variant: Variant,
    /// Covariate names, in slope order.
    pub covariates: Vec<String>,
    pub reference: String,
    pub coefficients: Vec<StratumCoefficients>,
    pub converged: bool,
    pub iterations: usize,
    /// Whether the final M-step reached its gradient tolerance. False under
    /// separation, where some coefficients drift without bound.
    #[serde(default = "yes")]
    pub m_step_converged: bool,
    /// NaN for models that were not fitted to data.
    #[serde(deserialize_with = "nullable_f64")]
    pub loglik: f64,
    /// Observed-data log-likelihood after each EM iteration.
    #[serde(default)]
    pub loglik_trace: Vec<f64>,
}

impl PrincipalScoreModel {
    /// Build a model directly from a `3 x (1 + k)` coefficient matrix whose
    /// first row is the reference category.
    pub fn from_matrix(variant: Variant, covariates: Vec<String>, coef: &DMatrix<f64>) -> Result<Self> {
        let k = covariates.len();
        if coef.nrows() != 3 || coef.ncols() != k + 1 {
            return Err(Error::DimensionMismatch {
                expected: 3 * (k + 1),
                found: coef.nrows() * coef.ncols(),
            });
        }
        if let Variant::Cpsr { xi } = variant {
            if !(xi.is_finite() && xi >= 0.0) {
                return Err(Error::invalid(format!("xi must be a nonnegative real, got {xi}")));
            }
        }
        let coefficients = variant
            .free_strata()
            .iter()
            .enumerate()
            .map(|(r, name)| StratumCoefficients {
                stratum: name.to_string(),
                intercept: coef[(r + 1, 0)] - coef[(0, 0)],
                slopes: (1..=k).map(|j| coef[(r + 1, j)] - coef[(0, j)]).collect(),
            })
            .collect();
        Ok(PrincipalScoreModel {
            variant,
            covariates,
            reference: variant.reference().to_string(),
            coefficients,
            converged: true,
            iterations: 0,
            m_step_converged: true,
            loglik: f64::NAN,
            loglik_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.covariates.len()
    }

    pub fn xi(&self) -> f64 {
        self.variant.xi()
    }

    pub fn coefficient(&self, stratum: &str) -> Option<&StratumCoefficients> {
        self.coefficients.iter().find(|c| c.stratum == stratum)
    }

    /// `3 x (1 + k)` matrix with the reference row first.
    pub fn coef_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::zeros(3, k + 1);
        for (r, c) in self.coefficients.iter().enumerate() {
            m[(r + 1, 0)] = c.intercept;
            for j in 0..k {
                m[(r + 1, j + 1)] = c.slopes[j];
            }
        }
        m
    }

    fn check_dim(&self, x0: &[f64]) -> Result<()> {
        if x0.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                found: x0.len(),
            });
        }
        Ok(())
    }

    fn category_probs(&self, x0: &[f64]) -> [f64; 3] {
        let eta: Vec<f64> = std::iter::once(0.0)
            .chain(self.coefficients.iter().map(|c| {
                c.intercept + c.slopes.iter().zip(x0).map(|(b, x)| b * x).sum::<f64>()
            }))
            .collect();
        let p = softmax(&eta);
        [p[0], p[1], p[2]]
    }

    /// Stratum probabilities at `x0` (values of `self.covariates`, in order).
    pub fn predict(&self, x0: &[f64]) -> Result<StratumProbs> {
        self.check_dim(x0)?;
        Ok(strata_from_categories(self.variant, self.category_probs(x0)))
    }

    pub fn predict_pi_tilde(&self, x0: &[f64]) -> Result<PiTilde> {
        let p = self.predict(x0)?;
        let pi1_as = if p.pro == 0.0 { 1.0 } else { p.as_ / (p.as_ + p.pro) };
        let pi0_as = match self.variant {
            Variant::Monotonicity => 1.0,
            Variant::Cpsr { xi } => 1.0 / (1.0 + xi),
        };
        Ok(PiTilde { pi1_as, pi0_as })
    }

    /// Covariate feature indices of this model in `d`.
    pub fn feature_indices(&self, d: &Dataset) -> Result<Vec<usize>> {
        self.covariates.iter().map(|c| d.feature_index(c)).collect()
    }

    pub fn covariate_row(&self, d: &Dataset, unit: usize, features: &[usize]) -> Vec<f64> {
        let u = d.unit(unit);
        features.iter().map(|&j| u.feature(j)).collect()
    }

    /// Stratum probabilities for every unit of `d`.
    pub fn predict_dataset(&self, d: &Dataset) -> Result<Vec<StratumProbs>> {
        let f = self.feature_indices(d)?;
        (0..d.len()).map(|i| self.predict(&self.covariate_row(d, i, &f))).collect()
    }

    pub fn pi_tilde_dataset(&self, d: &Dataset) -> Result<Vec<PiTilde>> {
        let f = self.feature_indices(d)?;
        (0..d.len()).map(|i| self.predict_pi_tilde(&self.covariate_row(d, i, &f))).collect()
    }

    /// Observed-data log-likelihood on `d`.
    pub fn observed_loglik(&self, d: &Dataset) -> Result<f64> {
        let f = self.feature_indices(d)?;
        let mut ll = 0.0;
        for (i, u) in d.units().iter().enumerate() {
            let p = self.predict(&self.covariate_row(d, i, &f))?;
            ll += cell_likelihood(&p, u.treated, u.survived).ln();
        }
        Ok(ll)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PrincipalScoreModel = serde_json::from_str(s)?;
        if m.coefficients.len() != 2 || m.coefficients.iter().any(|c| c.slopes.len() != m.covariates.len()) {
            return Err(Error::invalid("coefficient table does not match the covariate list"));
        }
        Ok(m)
    }
}

fn yes() -> bool {
    true
}

fn nullable_f64<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(de)?.unwrap_or(f64::NAN))
}

fn strata_from_categories(variant: Variant, [r, a, b]: [f64; 3]) -> StratumProbs {
    match variant {
        Variant::Monotonicity => StratumProbs {
            pro: r,
            as_: a,
            har: 0.0,
            ns: b,
        },
        Variant::Cpsr { xi } => StratumProbs {
            as_: r / (1.0 + xi),
            har: r * xi / (1.0 + xi),
            pro: a,
            ns: b,
        },
    }
}

fn category_probs_at(coef: &DMatrix<f64>, row: &[f64]) -> [f64; 3] {
    let mut eta = [0.0; 3];
    for (c, e) in eta.iter_mut().enumerate() {
        *e = row.iter().enumerate().map(|(j, x)| coef[(c, j)] * x).sum();
    }
    let p = softmax(&eta);
    [p[0], p[1], p[2]]
}

/// Probability of the observed (A, S) cell given stratum probabilities.
fn cell_likelihood(p: &StratumProbs, treated: bool, survived: bool) -> f64 {
    match (treated, survived) {
        (false, true) => p.as_ + p.har,
        (false, false) => p.pro + p.ns,
        (true, true) => p.as_ + p.pro,
        (true, false) => p.har + p.ns,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting coefficients (`3 x (1 + k)`, reference row first). Zero if absent.
    #[serde(skip)]
    pub init: Option<DMatrix<f64>>,
    /// Additional randomly perturbed starts; the highest likelihood wins.
    pub extra_starts: usize,
    pub seed: u64,
    pub newton: NewtonOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-6,
            max_iter: 500,
            init: None,
            extra_starts: 0,
            seed: 0,
            newton: NewtonOptions::default(),
        }
    }
}

/// Feature indices of the principal-score covariates declared in `d`.
pub fn principal_score_features(d: &Dataset) -> Vec<usize> {
    d.role_features(Role::PrincipalScore)
}

pub fn fit_em_monotonicity(d: &Dataset, features: &[usize], opts: &EmOptions) -> Result<PrincipalScoreModel> {
    fit_em(d, features, Variant::Monotonicity, opts)
}

/// EM without monotonicity, for a fixed harmed/always-survivor ratio `xi`.
/// Values of `xi` outside the empirical bounds are accepted; the caller can
/// check them with [`xi_bounds`].
pub fn fit_em_cpsr(d: &Dataset, xi: f64, features: &[usize], opts: &EmOptions) -> Result<PrincipalScoreModel> {
    if !(xi.is_finite() && xi >= 0.0) {
        return Err(Error::invalid(format!("xi must be a nonnegative real, got {xi}")));
    }
    fit_em(d, features, Variant::Cpsr { xi }, opts)
}

/// Latent-class layout: which (category, weight-rule) rows each unit expands to.
#[derive(Clone, Copy)]
enum Cell {
    A0S1,
    A0S0,
    A1S1,
    A1S0,
}

struct Augmented {
    design: Design,
    labels: Vec<usize>,
    /// Cell of each unit and the range of its augmented rows.
    units: Vec<(Cell, std::ops::Range<usize>)>,
}

// Category indices: 0 = reference, 1 and 2 = free rows.
// Monotonicity: 0 = pro, 1 = as, 2 = ns.  CPSR: 0 = ah, 1 = pro, 2 = ns.
fn augment(d: &Dataset, features: &[usize], variant: Variant) -> Augmented {
    let p = features.len() + 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut units = Vec::new();
    for u in d.units() {
        let cell = match (u.treated, u.survived) {
            (false, true) => Cell::A0S1,
            (false, false) => Cell::A0S0,
            (true, true) => Cell::A1S1,
            (true, false) => Cell::A1S0,
        };
        let cats: &[usize] = match (variant, cell) {
            (Variant::Monotonicity, Cell::A0S1) => &[1],
            (Variant::Monotonicity, Cell::A1S0) => &[2],
            (Variant::Monotonicity, Cell::A1S1) => &[1, 0],
            (Variant::Monotonicity, Cell::A0S0) => &[2, 0],
            (Variant::Cpsr { .. }, Cell::A0S1) => &[0],
            (Variant::Cpsr { .. }, Cell::A1S0) => &[0, 2],
            (Variant::Cpsr { .. }, Cell::A1S1) => &[0, 1],
            (Variant::Cpsr { .. }, Cell::A0S0) => &[2, 1],
        };
        let start = labels.len();
        for &c in cats {
            data.push(1.0);
            data.extend(features.iter().map(|&j| u.feature(j)));
            labels.push(c);
        }
        units.push((cell, start..labels.len()));
    }
    Augmented {
        design: Design::new(labels.len(), p, data),
        labels,
        units,
    }
}

/// E-step: posterior weight of each augmented row given current category
/// probabilities `q` (indexed by category) for its unit.
fn membership_weight(variant: Variant, cell: Cell, label: usize, q: &[f64]) -> f64 {
    let share = match (variant, cell) {
        (_, Cell::A0S1) => return 1.0,
        (Variant::Monotonicity, Cell::A1S0) => return 1.0,
        // as vs pro
        (Variant::Monotonicity, Cell::A1S1) => q[1] / (q[1] + q[0]),
        // ns vs pro
        (Variant::Monotonicity, Cell::A0S0) => q[2] / (q[2] + q[0]),
        // harmed part of ah vs ns
        (Variant::Cpsr { xi }, Cell::A1S0) => {
            let har = q[0] * xi / (1.0 + xi);
            if har == 0.0 {
                0.0
            } else {
                har / (har + q[2])
            }
        }
        // as part of ah vs pro
        (Variant::Cpsr { xi }, Cell::A1S1) => {
            let as_ = q[0] / (1.0 + xi);
            as_ / (as_ + q[1])
        }
        // ns vs pro
        (Variant::Cpsr { .. }, Cell::A0S0) => q[2] / (q[2] + q[1]),
    };
    let first = match (variant, cell) {
        (Variant::Monotonicity, Cell::A1S1) => 1,
        (Variant::Monotonicity, Cell::A0S0) => 2,
        (Variant::Cpsr { .. }, Cell::A1S0) => 0,
        (Variant::Cpsr { .. }, Cell::A1S1) => 0,
        (Variant::Cpsr { .. }, Cell::A0S0) => 2,
        _ => unreachable!(),
    };
    let w = if label == first { share } else { 1.0 - share };
    if w < WEIGHT_FLOOR {
        0.0
    } else {
        w
    }
}

fn has_latent_uncertainty(d: &Dataset, variant: Variant) -> bool {
    d.units().iter().any(|u| match (u.treated, u.survived) {
        (true, true) | (false, false) => true,
        (true, false) => variant.xi() > 0.0,
        (false, true) => false,
    })
}

fn fit_em(d: &Dataset, features: &[usize], variant: Variant, opts: &EmOptions) -> Result<PrincipalScoreModel> {
    for treated in [false, true] {
        if d.arm(treated).is_empty() {
            return Err(Error::Unidentified(format!("treatment arm A={} is empty", treated as u8)));
        }
    }
    if d.units().iter().all(|u| !u.survived) {
        return Err(Error::Unidentified("no survivors in either arm".into()));
    }
    let k = features.len();
    let covariates = d.feature_names(features);
    let aug = augment(d, features, variant);

    let mut starts = vec![opts.init.clone().unwrap_or_else(|| DMatrix::zeros(3, k + 1))];
    if opts.extra_starts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..opts.extra_starts {
            let mut m = DMatrix::zeros(3, k + 1);
            for r in 1..3 {
                m[(r, 0)] = noise.sample(&mut rng);
            }
            starts.push(m);
        }
    }

    let mut best: Option<PrincipalScoreModel> = None;
    for init in starts {
        let model = run_em(d, &aug, variant, covariates.clone(), init, opts)?;
        let better = match &best {
            None => true,
            Some(b) => model.loglik > b.loglik,
        };
        if better {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one start"))
}

fn run_em(
    d: &Dataset,
    aug: &Augmented,
    variant: Variant,
    covariates: Vec<String>,
    init: DMatrix<f64>,
    opts: &EmOptions,
) -> Result<PrincipalScoreModel> {
    let k = covariates.len();
    if init.nrows() != 3 || init.ncols() != k + 1 {
        return Err(Error::DimensionMismatch {
            expected: 3 * (k + 1),
            found: init.nrows() * init.ncols(),
        });
    }
    let deterministic = !has_latent_uncertainty(d, variant);
    let mut coef = init;
    let mut weights = vec![0.0; aug.labels.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut m_step_converged = false;
    let mut iterations = 0;

    // E-step weights at `coef`, returning the observed log-likelihood there.
    let e_step = |coef: &DMatrix<f64>, weights: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for (cell, rows) in &aug.units {
            let q = category_probs_at(coef, aug.design.row(rows.start));
            let (treated, survived) = match cell {
                Cell::A0S1 => (false, true),
                Cell::A0S0 => (false, false),
                Cell::A1S1 => (true, true),
                Cell::A1S0 => (true, false),
            };
            ll += cell_likelihood(&strata_from_categories(variant, q), treated, survived).ln();
            for r in rows.clone() {
                weights[r] = membership_weight(variant, *cell, aug.labels[r], &q);
            }
        }
        ll
    };

    let mut ll = e_step(&coef, &mut weights);
    while iterations < opts.max_iter {
        iterations += 1;
        let fit = fit_weighted_multinomial(&aug.design, &aug.labels, &weights, 3, 0, Some(&coef), opts.newton)?;
        let delta = (&fit.coef - &coef).amax();
        m_step_converged = fit.converged;
        coef = fit.coef;

        let prev = ll;
        ll = e_step(&coef, &mut weights);
        debug_assert!(
            ll >= prev - 1e-7 * (1.0 + prev.abs()),
            "EM log-likelihood decreased: {prev} -> {ll}"
        );
        trace.push(ll);
        // Without ambiguous cells the E-step does not depend on the
        // parameters, so one M-step is the fixed point.
        if delta < opts.tol || deterministic {
            converged = true;
            break;
        }
    }

    let mut model = PrincipalScoreModel::from_matrix(variant, covariates, &coef)?;
    model.converged = converged;
    model.m_step_converged = m_step_converged;
    model.iterations = iterations;
    model.loglik = *trace.last().expect("at least one iteration");
    model.loglik_trace = trace;
    Ok(model)
}

/// Empirical bounds for `xi = pi_har / pi_as` implied by the survival rates.
pub fn xi_bounds(p0: f64, p1: f64) -> Result<(f64, f64)> {
    for (name, v) in [("p0", p0), ("p1", p1)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::OutOfBounds {
                name,
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    let lo = ((p0 - p1) / p1).max(0.0);
    let denom = p0 - (1.0 - p1);
    let hi = if denom > 0.0 { ((1.0 - p1) / denom).min(1.0) } else { 1.0 };
    if lo > hi {
        return Err(Error::Unidentified(format!(
            "survival rates ({p0}, {p1}) admit no ratio in [0, 1]"
        )));
    }
    Ok((lo, hi))
}

pub fn xi_bounds_for(d: &Dataset) -> Result<(f64, f64)> {
    let (p0, p1) = survival_rates(d)?;
    xi_bounds(p0, p1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataProportions {
    pub pi_as: f64,
    pub pi_har: f64,
    pub pi_pro: f64,
    pub pi_ns: f64,
}

impl StrataProportions {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pi_as, self.pi_har, self.pi_pro, self.pi_ns]
    }

    /// Round to `decimals` places while keeping the total at exactly one
    /// (largest-remainder apportionment).
    pub fn rounded(&self, decimals: u32) -> StrataProportions {
        let scale = 10f64.powi(decimals as i32);
        let raw = self.as_array().map(|v| v * scale);
        let mut units = raw.map(|v| v.floor());
        let total = scale.round() as i64;
        let short = total - units.iter().sum::<f64>().round() as i64;
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (raw[b] - units[b]).total_cmp(&(raw[a] - units[a])).then(a.cmp(&b)));
        for &i in order.iter().take(short.max(0) as usize) {
            units[i] += 1.0;
        }
        let [a, h, p, n] = units.map(|u| u / scale);
        StrataProportions {
            pi_as: a,
            pi_har: h,
            pi_pro: p,
            pi_ns: n,
        }
    }
}

/// Population stratum shares implied by `(p0, p1, xi)`.
pub fn strata_proportions(p0: f64, p1: f64, xi: f64) -> Result<StrataProportions> {
    let (lo, hi) = xi_bounds(p0, p1)?;
    let slack = 1e-12;
    if !(xi >= lo - slack && xi <= hi + slack) {
        return Err(Error::OutOfBounds {
            name: "xi",
            value: xi,
            lo,
            hi,
        });
    }
    let pi_as = p0 / (1.0 + xi);
    let pi_har = xi * p0 / (1.0 + xi);
    Ok(StrataProportions {
        pi_as,
        pi_har,
        pi_pro: (p1 - pi_as).max(0.0),
        pi_ns: (1.0 - p1 - pi_har).max(0.0),
    })
}
