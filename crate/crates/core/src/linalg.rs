//! Small dense helpers shared by the regression and likelihood code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * p, "design buffer has wrong length");
        Design { n, p, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let p = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            assert_eq!(r.as_ref().len(), p, "ragged design rows");
            data.extend_from_slice(r.as_ref());
        }
        Design { n: rows.len(), p, data }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked_cholesky(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = a.clone().cholesky()?;
    let diag_max = a.diagonal().amax();
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot * min_pivot > 1e-13 * diag_max.max(1e-300) {
        Some(chol)
    } else {
        None
    }
}

/// Solve the SPD system `a x = b`. Fails when `a` is numerically singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    checked_cholesky(a).map(|c| c.solve(b))
}

pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    checked_cholesky(a).map(|c| c.inverse())
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix; also reports whether
/// the matrix was singular at `rel_tol`.
pub fn pinv_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, bool) {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut singular = false;
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() <= rel_tol * max || lam.abs() == 0.0 {
            singular = true;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) / lam;
    }
    (out, singular)
}

/// Weighted least squares via the normal equations.
pub fn weighted_least_squares(x: &Design, y: &[f64], w: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for i in 0..x.nrows() {
        let r = x.row(i);
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            xtwy[a] += wi * r[a] * y[i];
            for b in 0..=a {
                xtwx[(a, b)] += wi * r[a] * r[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    let chol = checked_cholesky(&xtwx).ok_or_else(|| Error::RankDeficient(format!("X'WX ({p}x{p}) is singular")))?;
    Ok((chol.solve(&xtwy), chol.inverse()))
}

/// Sample covariance of the given rows (denominator n - 1).
pub fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut mean = vec![0.0; p];
    for r in rows {
        for j in 0..p {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(p, p);
    for r in rows {
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    cov / (n as f64 - 1.0).max(1.0)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator n - 1 (0 for n < 2).
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn sd(v: &[f64]) -> f64 {
    variance(v).sqrt()
}
