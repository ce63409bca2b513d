//! Two-phase GMM estimation for logistic regression.
//!
//! Phase I observes the outcome and cheap covariates on everyone; phase II
//! adds expensive covariates on a stratified subsample. A reduced logistic
//! model fitted on phase I is combined with inverse-probability-weighted
//! phase-II estimating equations, and the stacked system is solved by
//! iterated GMM with sandwich standard errors.

pub mod asymptotics;
pub mod baselines;
pub mod datagen;
pub mod design;
pub mod error;
pub mod estimator;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod logistic;
pub mod model;
pub mod moments;
pub mod normal;
pub mod study;

pub use error::{Error, Result};
