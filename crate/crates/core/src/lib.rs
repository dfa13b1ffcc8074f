//! Estimation of sparse main effects and low-rank interactions from mixed,
//! incompletely observed data frames.
//!
//! The parameter matrix of an `m1 x m2` table is modelled as
//! `X = sum_k alpha_k U^k + L`, where the `U^k` form a fixed [`Dictionary`]
//! (group effects, row/column effects, single-cell corruptions, or custom
//! sparse atoms), `alpha` is sparse and `L` has low rank. Every column carries
//! its own exponential-family [`Link`] (Gaussian, Bernoulli or Poisson), and
//! `(alpha, L)` minimizes the negative quasi-log-likelihood over observed
//! cells plus `lambda1 * ||L||_* + lambda2 * ||alpha||_1`.
//!
//! The solver ([`bcgd::fit`]) alternates an `alpha` step (a weighted Lasso
//! solved by coordinate descent) and an `L` step (a weighted nuclear-norm
//! problem solved by EM soft-impute iterations), each followed by an Armijo
//! line search, so the objective never increases.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, experiments and
//! the command line live in the companion `mimi` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bcgd;
pub mod dictionary;
mod error;
pub mod expfam;
pub mod frame;
pub mod linalg;
pub mod selection;
pub mod simulate;
pub mod subsolvers;

pub use bcgd::{fit, fit_from, impute, objective, FitDiagnostics, ModelFit, SolverConfig};
pub use dictionary::{Dictionary, DictionaryMetadata, Structure};
pub use error::{Error, Result};
pub use expfam::{CurvatureBounds, Link};
pub use frame::{ColumnType, MaskStats, MixedDataFrame};

/// Dense column-major matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense vector of main-effect coefficients.
pub type Vector = nalgebra::DVector<f64>;
