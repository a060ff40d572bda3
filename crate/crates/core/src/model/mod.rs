//! Detector network, training loop and checkpoints.

mod checkpoint;
mod detector;
pub mod nn;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use detector::{Detector, DetectorConfig, DetectorGrads, HeadOutput, PredictConfig};
pub use nn::{AdamConfig, AdamState};
pub use train::{
    learning_rate_at, prepare_samples, training_chips, ImageLoss, StepRecord, TrainConfig, TrainSample, Trainer,
};
