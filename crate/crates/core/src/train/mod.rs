//! Training, evaluation and inference.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
pub use config::{Preset, TrainConfig};
pub use eval::{evaluate, predict_video, ModelPredictor, Predictor};
pub use infer::{infer, InferOptions};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::CosineSchedule;
pub use trainer::{train, TrainOptions};
