use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Architecture;
use crate::semantics::NewCaseMode;

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_max_norm: f64,

    pub lambda_delta: f64,
    pub lambda_dag: f64,
    pub lambda_sp: f64,
    pub lambda_sp_prime: f64,

    /// Sigmoid temperature of the exceptionality function.
    pub alpha: f64,
    pub clusters_per_class: usize,
    /// Semantics steps.
    pub iterations: usize,
    pub lse_temperature: f64,

    pub embedding_dim: usize,
    pub extractor_widths: Vec<usize>,
    pub head_hidden_widths: Vec<usize>,

    /// Re-weight the task loss by `sqrt(|D| / (C * n_c))`.
    pub class_weighting: bool,
    pub new_case_mode: NewCaseMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// A small configuration suited to low-dimensional toy problems.
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            grad_max_norm: 3.0,
            lambda_delta: 1.0,
            lambda_dag: 1e-4,
            lambda_sp: 1e-4,
            lambda_sp_prime: 1e-4,
            alpha: 10.0,
            clusters_per_class: 5,
            iterations: 5,
            lse_temperature: 0.025,
            embedding_dim: 16,
            extractor_widths: vec![16, 16],
            head_hidden_widths: vec![16],
            class_weighting: true,
            new_case_mode: NewCaseMode::Folded,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters for the Glioma grading task: 64-wide extractor and
    /// heads, `d = 64`.
    pub fn glioma() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 1e-4,
            epochs: 32,
            batch_size: 64,
            grad_max_norm: 3.0,
            lambda_delta: 1.0,
            lambda_dag: 1e-4,
            lambda_sp: 1e-4,
            lambda_sp_prime: 1e-4,
            alpha: 10.0,
            clusters_per_class: 5,
            iterations: 5,
            lse_temperature: 0.025,
            embedding_dim: 64,
            extractor_widths: vec![64, 64],
            head_hidden_widths: vec![64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("grad_max_norm", self.grad_max_norm),
            ("alpha", self.alpha),
            ("lse_temperature", self.lse_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("lambda_delta", self.lambda_delta),
            ("lambda_dag", self.lambda_dag),
            ("lambda_sp", self.lambda_sp),
            ("lambda_sp_prime", self.lambda_sp_prime),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("clusters_per_class", self.clusters_per_class),
            ("iterations", self.iterations),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.extractor_widths.is_empty() || self.extractor_widths.contains(&0) || self.head_hidden_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive and the extractor non-empty".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, input_width: usize) -> Architecture {
        Architecture {
            input_width,
            extractor_widths: self.extractor_widths.clone(),
            head_hidden_widths: self.head_hidden_widths.clone(),
            embedding_dim: self.embedding_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::glioma().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let bad = TrainConfig { lse_temperature: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lambda_dag: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
