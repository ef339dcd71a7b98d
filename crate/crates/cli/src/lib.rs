//! Experiment runner for the DEFEND simulator: TOML configs, seed and
//! malicious-rate sweeps, CSV/JSON artifacts and run comparison.

pub mod compare;
pub mod config;
pub mod run;
pub mod stats;
