//! Numerical federated-learning core.

mod aggregate;
mod dataset;
mod model;
mod partition;
mod select;

use thiserror::Error;

pub use aggregate::{aggregate_fedavg, AggregatorSpec, FedAvgMState, FedYogiState, ServerOptimizer};
pub use dataset::{make_synthetic_dataset, make_synthetic_split, Dataset, DatasetSpec};
pub use model::{
    cross_entropy_grad, evaluate, local_train, proximal_grad, proximal_penalty, Architecture, ModelParams,
    TrainConfig,
};
pub use partition::{partition, Partition, PartitionSpec};
pub use select::{select_clients, selection_size, ClientState, SelectionStrategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("partition constraint violated: {0}")]
    Validation(String),
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    NumericalDivergence { epoch: usize, batch: usize },
    #[error("nothing to aggregate")]
    EmptyAggregation,
}
