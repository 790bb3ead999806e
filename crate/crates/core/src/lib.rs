//! Deterministic co-simulation of federated learning over a flow-level network.

pub mod cli;
pub mod config;
pub mod fl;
pub mod metrics;
pub mod netsim;
pub mod orchestrator;
pub mod seed;
pub mod topology;
pub mod traffic;
