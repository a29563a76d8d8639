//! Metrics for both task formulations and the identity-invariance analysis.

mod invariance;
mod metrics;
mod predict;

pub use invariance::{distance_matrix, identity_invariance, InvarianceReport, PairStat};
pub use metrics::{
    classification_metrics, confusion_matrix, counting_metrics, mean_sd, metrics_from_confusion, per_activity_mae,
    per_user_count_classification, per_user_count_counting, sample_macro_f1, truth_counts, ClassificationMetrics,
    CountingMetrics, GroupMetric,
};
pub use predict::{evaluate, predict, predict_images, MetricReport, Predictions};
