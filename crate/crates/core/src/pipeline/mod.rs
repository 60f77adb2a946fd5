//! Training, cross-validated evaluation and embedding export.

mod config;
mod data;
mod eval;
mod export;
mod train;

pub use config::{AugmentPair, TrainConfig};
pub use data::{balanced_accounts, build_dataset, label_pools};
pub use eval::{
    cross_validate, cross_validate_baseline, evaluate_f1, predict, stratified_folds, ConfigEntry, Confusion,
    DatasetSummary, Evaluation, FoldResult, MetricsReport, Summary, METRICS_SCHEMA,
};
pub use export::{export_embeddings, pca_2d, principal_axes};
pub use train::{train, BatchLoss, TrainOutcome};

#[cfg(test)]
mod tests;
