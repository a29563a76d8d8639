//! Optimizer, schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod fit;
pub mod optim;
pub mod schedule;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
pub use fit::{fit, recalibrate_norm_stats, validation_split, EpochRecord, FitOptions, Selection, StepRecord, TrainConfig, TrainLog};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use schedule::{Granularity, LrSchedule};
