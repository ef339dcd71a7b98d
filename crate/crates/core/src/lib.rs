//! Deterministic federated-learning security simulator.
//!
//! Clients train a small dense classifier on non-IID shards while a fraction
//! of them run targeted label-flipping attacks. The server aggregates with
//! FedAvg, one of several robust baselines, or the DEFEND pipeline: output
//! neuron magnitude analysis to recover the attack goal, two-component GMM
//! filtering of poisoned updates, a metric-gated rollback of the global model
//! and rating-based blacklisting of persistent offenders.

pub mod aggregation;
pub mod data;
pub mod defend;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
