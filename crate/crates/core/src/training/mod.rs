//! Losses, two-phase training, and checkpoints.

pub mod checkpoint;
pub mod losses;
pub mod trainer;

pub use checkpoint::{param_digest, Checkpoint, CheckpointError};
pub use losses::{combined_loss, dice_loss, focal_loss, generative_nll};
pub use trainer::{
    classifier_probs, micro_f1,
    prepare, EpochLog, OptimizerKind, Prepared, TrainConfig, TrainError, Trainer, TrainingData,
};
