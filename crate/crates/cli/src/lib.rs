//! Experiment runner for the federated domain-generalization simulator.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod variant;
