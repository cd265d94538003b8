//! Per-object binary intent classifier.
//!
//! Two branches read the same `sw × 3` window: parallel temporal convolutions
//! (kernels 3, 7, 13) with squeeze-excitation channel gating, and a pre-norm
//! transformer encoder over projected features plus sinusoidal positions. Both
//! are mean-pooled over time, concatenated and mapped through a two-layer head
//! to a sigmoid probability.

mod checkpoint;
mod gradcheck;
mod model;
mod params;
mod tensor;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, ProbeResult};
pub use model::{
    backward, bce_logit_grad, bce_loss, forward, loss_and_grads, positional_encoding,
    predict_proba, GradFault, Mode, Trace, PROB_CLAMP,
};
pub use params::{EncoderLayer, Linear, ModelConfig, ModelParams, Norm, KERNEL_SCALES};
pub use tensor::Mat;
pub use train::{evaluate, gather, predict_all, separable_fixture, train, train_from, EpochMetrics, TrainConfig};

use crate::features::{FeatureWindow, WindowBatch};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub decided: bool,
}

impl Prediction {
    /// Intent only when the probability is strictly above one half.
    pub fn from_probability(y_hat: f64) -> Self {
        Self {
            y_hat,
            decided: y_hat > 0.5,
        }
    }
}

/// Score a single window.
pub fn predict(
    window: &FeatureWindow,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Prediction, NetError> {
    let batch = WindowBatch::from_windows([window]).map_err(|e| NetError::Shape(e.to_string()))?;
    let y = predict_proba(params, config, &batch)?;
    Ok(Prediction::from_probability(y[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_strict() {
        assert!(Prediction::from_probability(0.7).decided);
        assert!(!Prediction::from_probability(0.5).decided);
        assert!(!Prediction::from_probability(0.3).decided);
    }
}
