//! Physics-guided counterfactual explanations for multivariate flux time-series classifiers.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod forest;
pub mod genetic;
pub mod ingest;
pub mod metrics;
pub mod physics;
pub mod reconstruction;
pub mod rng;
pub mod series;

pub use error::{PgceError, Result};
