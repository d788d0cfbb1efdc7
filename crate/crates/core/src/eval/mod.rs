//! Metrics, distribution diagnostics and the experiment runner.

pub mod diagnostics;
pub mod runner;
pub mod metrics;
pub mod stats;
