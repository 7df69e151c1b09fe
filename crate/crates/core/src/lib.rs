//! Batched ride-pooling simulation with fairness-aware matching objectives.
//!
//! Requests are collected into fixed-length epochs and assigned to drivers by
//! solving a set-packing program over per-driver feasible request bundles.
//! Each bundle is weighted by the change it causes in the chosen objective plus
//! a discounted estimate of the driver's future value. On top of the simulator
//! sit Shapley-value estimation over driver coalitions and a risk-parameterised
//! income redistribution scheme.
//!
//! Module map:
//!
//! - [`city`]: locations, all-pairs travel times, fares, k-means neighborhoods
//! - [`demand`]: trip ingestion, synthetic demand, epoch batching, request log
//! - [`fleet`]: driver state and route execution
//! - [`matching`]: feasible bundles, route search, exact assignment solver
//! - [`objectives`]: request/income/rider-fairness/driver-fairness objectives
//! - [`value`]: pluggable value estimator with a tabular TD learner
//! - [`redistribution`]: Shapley values, payouts, gain metric
//! - [`reporting`]: fairness and profitability metrics
//! - [`simulation`]: the epoch loop tying the pieces together
//! - [`config`]: flat key-value run configuration

pub mod city;
pub mod config;
pub mod demand;
mod error;
pub mod fleet;
pub mod matching;
pub mod objectives;
pub mod redistribution;
pub mod reporting;
pub mod rng;
pub mod simulation;
pub mod stats;
pub mod value;

pub use error::{Error, Result};
