//! Training, evaluation and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod degradation;
pub mod evaluate;
pub mod gradcheck;
pub mod respstd;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorData};
pub use config::{ArchConfig, DataSource, TrainConfig};
pub use degradation::{run_degradation, DegradationConfig, DegradationReport};
pub use evaluate::evaluate;
pub use respstd::{layer_response_std, ResponseStats};
pub use train::{train, TrainLog, TrainLogRow, Trainer};
