//! Streaming covariate-shift adaptation toolkit.
//!
//! Tracks a time-varying density ratio between a fixed offline distribution
//! and a drifting online distribution with an ensemble of online Newton step
//! learners combined by an Adapt-ML-Prod meta-learner, and feeds the
//! estimated ratios into importance-weighted training of a linear predictor.
//! Ships one-step baselines (uLSIF / KLIEP), synthetic shift generators with
//! analytic ground-truth ratios, and a reproducible benchmark harness.

pub mod baselines;
pub mod bregman;
pub mod checks;
pub mod config;
pub mod datagen;
pub mod ensemble;
pub mod harness;
pub mod linalg;
pub mod ons;
pub mod predictor;

pub use config::{Hyperparams, HyperparamsConfig, LabeledSample, SeedSpec, UnlabeledBatch};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
