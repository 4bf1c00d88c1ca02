//! Matching-based estimation of the survivor average causal effect (SACE)
//! in randomized trials with truncation by death.

pub mod assignment;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod matching;
pub mod multinomial;
pub mod principal_score;
pub mod rng;
pub mod sensitivity;
pub mod simulation;

pub use data::{crosstab_survival, load_dataset, read_dataset, survival_rates, CrossTab, Dataset, Role, Schema, UnitRecord};
pub use error::{Error, Result};
