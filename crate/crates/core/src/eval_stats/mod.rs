//! Regression metrics, cross-dataset stability, attribute leakage probes and
//! group comparison statistics.

mod compare;
mod metrics;
mod probe;
mod stats;

pub use compare::{compare_groups, read_group_table, write_group_table, Comparisons, Contrast, GroupComparison, GroupRow};
pub use metrics::{
    attribute_r2, cross_dataset_cv, regression_metrics, tissue_bias_variance, AttributeR2, DatasetSummary, Dispersion,
    FoldResult, PredictionRecord, RegressionMetrics, StabilityReport,
};
pub use probe::{
    balanced_accuracy, probe_attribute, proxy_divergence, stratified_split, ProbeConfig, ProbeReport, SoftmaxRegression,
};
pub use stats::{bh_adjust, incomplete_beta, ln_gamma, stars, student_t_two_sided, welch_t_test, WelchResult};
