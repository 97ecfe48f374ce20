//! Frozen toy backbone, synthetic tasks and the adapter training loop.

pub mod data;
pub mod model;
pub mod optim;
pub mod trainer;

pub use data::{generate_task, Batch, ClusterGeometry, Split, TaskData, TaskSpec};
pub use model::{forward, gradients, loss, regularizer, BackboneConfig, Gradients, NoUpdates, TinyModel, Update, Updates};
pub use optim::{Adam, AdamConfig};
pub use trainer::{epochs_to_reach, evaluate, finetune_from, fresh_set, train_adapter, EpochRecord, TrainConfig, TrainResult};
