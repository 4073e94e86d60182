//! Optimizer, schedule, metrics, the training loop and experiment runners.

mod adam;
pub mod experiment;
mod metrics;
mod schedule;
mod trainer;

pub use adam::Adam;
pub use metrics::{accuracy, argmax_rows, auc, mse, Metrics};
pub use schedule::{lr_at, LossKind, TrainConfig};
pub use trainer::{config_hash, evaluate, predict_all, predict_classes, train, EpochRecord, TrainReport};
