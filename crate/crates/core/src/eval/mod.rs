//! Ranking metrics and significance testing.

mod metrics;
mod qrels;
mod report;
mod stats;

pub use metrics::{map_metric, mrr, ndcg_at_k, rankings_from_run, MetricValues, Rankings};
pub use qrels::Qrels;
pub use report::{compute_metrics, significance_mark, BaselineComparison, Comparison, MetricReport, METRIC_NAMES};
pub use stats::{paired_t_test, two_tailed_p, TTest};
