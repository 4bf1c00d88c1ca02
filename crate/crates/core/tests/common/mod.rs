#![allow(dead_code)]

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;

struct Negated<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Negated<F> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok(-(self.0)(p))
    }
}

impl<F: Fn(&[f64]) -> f64> Gradient for Negated<F> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> Result<Vec<f64>, argmin::core::Error> {
        let mut q = p.clone();
        Ok((0..p.len())
            .map(|j| {
                let h = 1e-6 * (1.0 + p[j].abs());
                q[j] = p[j] + h;
                let up = (self.0)(&q);
                q[j] = p[j] - h;
                let down = (self.0)(&q);
                q[j] = p[j];
                -(up - down) / (2.0 * h)
            })
            .collect())
    }
}

/// BFGS on central-difference gradients. Returns the maximizer and maximum.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, start: Vec<f64>) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut h0 = vec![vec![0.0; n]; n];
    for (i, row) in h0.iter_mut().enumerate() {
        row[i] = 1e-3;
    }
    let solver = BFGS::new(MoreThuenteLineSearch::new())
        .with_tolerance_grad(1e-9)
        .unwrap()
        .with_tolerance_cost(1e-14)
        .unwrap();
    let res = Executor::new(Negated(f), solver)
        .configure(|s| s.param(start).inv_hessian(h0).max_iters(2000))
        .run()
        .expect("bfgs");
    let best = res.state.best_param.clone().unwrap();
    (best, -res.state.best_cost)
}

use sace_core::data::{ColumnKind, ColumnMeta, Dataset, Role, Schema, UnitRecord};

pub fn schema(names: &[&str]) -> Schema {
    Schema {
        id: Some("id".into()),
        treatment: "a".into(),
        survival: "s".into(),
        outcome: "y".into(),
        columns: names
            .iter()
            .map(|n| ColumnMeta {
                name: (*n).into(),
                kind: ColumnKind::Continuous,
                roles: vec![Role::Distance, Role::PrincipalScore, Role::OutcomeModel, Role::Balance],
            })
            .collect(),
    }
}

/// Survivors only, from `(treated, covariates, outcome)` rows; ids follow row order.
pub fn survivors(rows: &[(bool, Vec<f64>, f64)], names: &[&str]) -> Dataset {
    let units = rows
        .iter()
        .enumerate()
        .map(|(i, (a, x, y))| UnitRecord {
            id: i as u64,
            x0: x.clone(),
            x1: vec![],
            treated: *a,
            survived: true,
            y: Some(*y),
        })
        .collect();
    Dataset::new(units, schema(names)).unwrap()
}
