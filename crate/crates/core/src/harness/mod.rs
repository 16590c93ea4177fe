//! Training, evaluation, checkpointing and benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use train::{evaluate, EpochLog, TextSource, Trainer};
