//! Casebase selection, objective, optimisation loop and metrics.

mod config;
mod kmeans;
mod loss;
mod metrics;
mod trainer;

pub use config::TrainConfig;
pub use kmeans::{kmeans_casebase, lloyd};
pub use loss::{class_weights, loss_dag, loss_delta, loss_sparsity, total_loss, LossBreakdown, LossInputs, LossTerms};
pub use metrics::Metrics;
pub use trainer::{evaluate, features_of, labels_of, train, EpochRecord, Forward, Prediction, TrainReport, TrainedModel};
