//! Cross-validated evaluation and classification metrics.

mod cv;
mod metrics;

pub use cv::{load_samples, run_cross_validation, AccessEntry, AccessLog, CvOptions, CvReport, CvRun, FoldResult, Phase, TestPrediction};
pub use metrics::{aggregate, compute_metrics, confusion, Aggregate, ConfusionMatrix, MetricSet};
