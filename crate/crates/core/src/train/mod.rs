//! Adam, the L1 training loop and evaluation metrics.

mod adam;
pub mod metrics;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use metrics::{compute_metrics, compute_metrics_with, format_metric, F1Average, MetricsReport};
pub use trainer::{evaluate, predict_all, train, EpochRecord, TrainConfig, TrainHistory};
