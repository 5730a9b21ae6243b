//! Multi-fidelity hyperparameter optimization with deep power-law ensembles.
//!
//! Budgets crossing module boundaries are either raw step counts (`usize`,
//! `1..=b_max`) or normalized budgets `b / b_max` in `(0, 1]` (`f64`). Every
//! curve model and surrogate consumes the normalized form.

// `!(x > 0.0)` is used deliberately so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod baselines;
pub mod benchmark;
pub mod curve_models;
pub mod error;
pub mod forecast;
pub mod hpo;
pub mod neural;
pub mod seeding;
pub mod stats;
pub mod surrogate;
pub mod trajectory;

pub use error::{Error, Result};
