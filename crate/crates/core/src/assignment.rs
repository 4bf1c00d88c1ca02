//! Rectangular min-cost assignment (Hungarian algorithm with potentials).

use std::cmp::Ordering;
use std::ops::{Add, Sub};

/// Cost that is compared lexicographically: `major` first, then `minor`.
///
/// Used to solve "maximize the number of admissible pairs, then minimize
/// their total distance" as a single assignment problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexCost {
    pub major: i64,
    pub minor: f64,
}

impl LexCost {
    pub const ZERO: LexCost = LexCost { major: 0, minor: 0.0 };
    const INF: LexCost = LexCost {
        major: i64::MAX / 4,
        minor: 0.0,
    };

    pub fn new(major: i64, minor: f64) -> Self {
        LexCost { major, minor }
    }
}

impl Add for LexCost {
    type Output = LexCost;
    fn add(self, o: LexCost) -> LexCost {
        LexCost::new(self.major + o.major, self.minor + o.minor)
    }
}

impl Sub for LexCost {
    type Output = LexCost;
    fn sub(self, o: LexCost) -> LexCost {
        LexCost::new(self.major - o.major, self.minor - o.minor)
    }
}

impl PartialOrd for LexCost {
    fn partial_cmp(&self, o: &LexCost) -> Option<Ordering> {
        Some(self.major.cmp(&o.major).then(self.minor.total_cmp(&o.minor)))
    }
}

/// Solve min-cost assignment of every row to a distinct column.
///
/// `cost` is row-major `n x m` with `n <= m`. Returns the column assigned to
/// each row. Deterministic for a given input.
pub fn hungarian(cost: &[LexCost], n: usize, m: usize) -> Vec<usize> {
    assert!(n <= m, "hungarian needs at least as many columns as rows");
    assert_eq!(cost.len(), n * m);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual start.
    let mut u = vec![LexCost::ZERO; n + 1];
    let mut v = vec![LexCost::ZERO; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![LexCost::INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = LexCost::INF;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}
