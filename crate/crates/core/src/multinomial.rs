//! Weighted multinomial logistic regression fitted by Newton-Raphson.
//!
//! Category `reference` has its linear predictor pinned at zero; the other
//! `C - 1` rows of the coefficient matrix are free.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, inverse_spd, solve_spd, Design};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Stop once the Euclidean norm of the score falls below this.
    pub grad_tol: f64,
    /// Stop after a step whose Newton decrement `step' * score / 2` is below
    /// this, relative to `1 + |loglik|`.
    #[serde(default = "default_decrement_tol")]
    pub decrement_tol: f64,
    pub max_iter: usize,
}

fn default_decrement_tol() -> f64 {
    1e-8
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            grad_tol: 1e-8,
            decrement_tol: default_decrement_tol(),
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// `C x p`; the reference row is identically zero.
    pub coef: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Category probabilities for one covariate row under `coef` (`C x p`).
pub fn softmax_row(coef: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let eta: Vec<f64> = (0..coef.nrows())
        .map(|c| (0..x.len()).map(|j| coef[(c, j)] * x[j]).sum())
        .collect();
    softmax(&eta)
}

pub fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(eta: &[f64], c: usize) -> f64 {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + eta.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    eta[c] - lse
}

struct Problem<'a> {
    x: &'a Design,
    labels: &'a [usize],
    weights: &'a [f64],
    n_cat: usize,
    reference: usize,
    free: Vec<usize>,
}

impl Problem<'_> {
    fn p(&self) -> usize {
        self.x.ncols()
    }

    fn dim(&self) -> usize {
        self.free.len() * self.p()
    }

    fn to_coef(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.p();
        let mut coef = DMatrix::zeros(self.n_cat, p);
        for (k, &c) in self.free.iter().enumerate() {
            for j in 0..p {
                coef[(c, j)] = theta[k * p + j];
            }
        }
        coef
    }

    fn from_coef(&self, coef: &DMatrix<f64>) -> DVector<f64> {
        let p = self.p();
        let mut theta = DVector::zeros(self.dim());
        for (k, &c) in self.free.iter().enumerate() {
            for j in 0..p {
                theta[k * p + j] = coef[(c, j)] - coef[(self.reference, j)];
            }
        }
        theta
    }

    fn fill_eta(&self, theta: &DVector<f64>, row: &[f64], eta: &mut [f64]) {
        let p = self.p();
        eta.iter_mut().for_each(|e| *e = 0.0);
        for (k, &c) in self.free.iter().enumerate() {
            eta[c] = dot(&theta.as_slice()[k * p..(k + 1) * p], row);
        }
    }

    fn loglik(&self, theta: &DVector<f64>) -> f64 {
        let mut eta = vec![0.0; self.n_cat];
        let mut ll = 0.0;
        for i in 0..self.x.nrows() {
            let w = self.weights[i];
            if w > 0.0 {
                self.fill_eta(theta, self.x.row(i), &mut eta);
                ll += w * log_softmax_at(&eta, self.labels[i]);
            }
        }
        ll
    }

    /// Log-likelihood, score vector and observed information (negative Hessian).
    fn evaluate(&self, theta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let dim = self.dim();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut info = DMatrix::zeros(dim, dim);
        let mut eta = vec![0.0; self.n_cat];
        let mut prob = vec![0.0; self.n_cat];
        for i in 0..self.x.nrows() {
            let w = self.weights[i];
            if w <= 0.0 {
                continue;
            }
            let row = self.x.row(i);
            self.fill_eta(theta, row, &mut eta);
            let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..self.n_cat {
                prob[c] = (eta[c] - m).exp();
                z += prob[c];
            }
            prob.iter_mut().for_each(|v| *v /= z);
            ll += w * (eta[self.labels[i]] - m - z.ln());
            for (k, &c) in self.free.iter().enumerate() {
                let resid = (self.labels[i] == c) as u8 as f64 - prob[c];
                for j in 0..p {
                    grad[k * p + j] += w * resid * row[j];
                }
                for (l, &d) in self.free.iter().enumerate().take(k + 1) {
                    let h = w * (if c == d { prob[c] } else { 0.0 } - prob[c] * prob[d]);
                    if h == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        let ha = h * row[a];
                        for b in 0..p {
                            info[(k * p + a, l * p + b)] += ha * row[b];
                        }
                    }
                }
            }
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                info[(r, c)] = info[(c, r)];
            }
        }
        (ll, grad, info)
    }
}

/// Maximize `sum_i w_i log P(label_i | x_i)` over a multinomial logit model.
///
/// Non-convergence (e.g. under separation) is reported through
/// `MultinomialFit::converged`, not as an error.
pub fn fit_weighted_multinomial(
    x: &Design,
    labels: &[usize],
    weights: &[f64],
    n_categories: usize,
    reference: usize,
    init: Option<&DMatrix<f64>>,
    opts: NewtonOptions,
) -> Result<MultinomialFit> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    if n_categories < 2 || reference >= n_categories {
        return Err(Error::invalid("need at least two categories and a valid reference"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_categories) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("all weights are zero"));
    }

    let prob = Problem {
        x,
        labels,
        weights,
        n_cat: n_categories,
        reference,
        free: (0..n_categories).filter(|&c| c != reference).collect(),
    };
    let mut theta = match init {
        Some(c) => {
            if c.nrows() != n_categories || c.ncols() != x.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: n_categories * x.ncols(),
                    found: c.nrows() * c.ncols(),
                });
            }
            prob.from_coef(c)
        }
        None => DVector::zeros(prob.dim()),
    };

    // Rank check on the weighted design, independent of the current iterate.
    let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..n {
        if weights[i] > 0.0 {
            let r = x.row(i);
            for a in 0..r.len() {
                for b in 0..r.len() {
                    xtwx[(a, b)] += weights[i] * r[a] * r[b];
                }
            }
        }
    }
    if inverse_spd(&xtwx).is_none() {
        return Err(Error::RankDeficient("weighted design of the multinomial model".into()));
    }

    let (mut ll, mut grad, mut info) = prob.evaluate(&theta);
    let mut grad_norm = grad.norm();
    let mut iterations = 0;
    let mut at_precision_floor = false;
    let mut small_decrement = false;
    while grad_norm >= opts.grad_tol && iterations < opts.max_iter {
        iterations += 1;
        let step = match solve_spd(&info, &grad) {
            Some(s) => s,
            None => {
                // Near-separation flattens the information; a ridge keeps the
                // direction an ascent direction.
                let ridge = 1e-8 * info.diagonal().amax().max(1.0);
                let mut reg = info.clone();
                for d in 0..reg.nrows() {
                    reg[(d, d)] += ridge;
                }
                match solve_spd(&reg, &grad) {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        // A Newton step below the resolution of the iterate means the score
        // is at its rounding-noise floor; further iterations cannot help.
        if step.iter().zip(theta.iter()).all(|(s, t)| s.abs() <= 1e-13 * (1.0 + t.abs())) {
            at_precision_floor = true;
            break;
        }
        let decrement = step.dot(&grad) / 2.0;
        let floor = ll - 1e-12 * ll.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for halving in 0..40 {
            let cand = &theta + &step * t;
            // The full step is nearly always taken; evaluate derivatives with it.
            if halving == 0 {
                let (cand_ll, g, h) = prob.evaluate(&cand);
                if cand_ll.is_finite() && cand_ll >= floor {
                    (theta, ll, grad, info) = (cand, cand_ll, g, h);
                    accepted = true;
                    break;
                }
            } else {
                let cand_ll = prob.loglik(&cand);
                if cand_ll.is_finite() && cand_ll >= floor {
                    (ll, grad, info) = prob.evaluate(&cand);
                    theta = cand;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        grad_norm = grad.norm();
        // Near separation the score decays only geometrically while the
        // attainable gain is already negligible.
        if decrement < opts.decrement_tol * (1.0 + ll.abs()) {
            small_decrement = true;
            break;
        }
    }

    Ok(MultinomialFit {
        coef: prob.to_coef(&theta),
        loglik: ll,
        iterations,
        converged: grad_norm < opts.grad_tol || at_precision_floor || small_decrement,
        grad_norm,
    })
}
