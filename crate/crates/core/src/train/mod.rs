//! SGDR training of the flat model and the evaluation metrics.

mod metrics;
mod schedule;
mod trainer;

pub use metrics::{evaluate, f1_lift_report, ClassMetrics, MetricsReport, TOP_KS};
pub use schedule::{annealed_lr, SgdrSchedule};
pub use trainer::{dataset_loss, label_indices, train, EpochMetrics, TrainConfig, TrainOutcome};
