//! Correlated binary data generation and the Monte Carlo harness for the
//! penalized GEE variance estimators.

pub mod config;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod output;

pub use config::GridConfig;
pub use datagen::{calibrate_intercept, generate_dataset, ClusterSizes, ModelForm, Scenario};
pub use error::{Result, SimError};
pub use harness::{aggregate, run_grid, run_replication, HarnessConfig, ScenarioOutcome, ScenarioResult};
