//! Optimization of the mesh regressor and the parameter MLP.

mod adam;
mod config;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use config::{TrainConfig, KEYS};
pub use train::{batch_indices, Checkpoint, StepLog};
