//! Gradient-boosted decision trees with a second-order logistic
//! objective, L2-regularized leaf weights and a per-split penalty.
//! One binary ensemble per (appliance, level) target; exact greedy
//! split search; fully deterministic training.

pub mod features;
pub mod io;
pub mod train;
pub mod tree;

use nilm_core::catalog::ApplianceStateVector;
use nilm_core::preprocess::WindowBatch;
use thiserror::Error;

pub use features::{window_features, FeatureSchema};
pub use train::{train, GbdtTrainParams};
pub use tree::TreeNode;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("model format error at {position}: {message}")]
    Format { position: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Boosted ensemble for one binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub target_id: String,
    /// Log-odds offset every tree output is added to.
    pub base_score: f64,
    pub trees: Vec<TreeNode>,
}

impl TargetModel {
    pub fn raw_score(&self, features: &[f64], learning_rate: f64) -> f64 {
        self.base_score
            + learning_rate * self.trees.iter().map(|t| t.predict(features)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub schema: FeatureSchema,
    pub learning_rate: f64,
    pub targets: Vec<TargetModel>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl GbdtModel {
    pub fn target_ids(&self) -> Vec<&str> {
        self.targets.iter().map(|t| t.target_id.as_str()).collect()
    }

    fn check_window(&self, window: &WindowBatch) -> Result<(), GbdtError> {
        if window.window_len != self.schema.window_len
            || window.feature_dim != self.schema.feature_dim
        {
            return Err(GbdtError::SchemaMismatch(format!(
                "model expects {}x{} windows, got {}x{}",
                self.schema.window_len, self.schema.feature_dim, window.window_len, window.feature_dim
            )));
        }
        Ok(())
    }

    /// Per-target ON probability for one window.
    pub fn predict_proba(&self, window: &WindowBatch) -> Result<Vec<f64>, GbdtError> {
        self.check_window(window)?;
        let x = window_features(window);
        Ok(self.predict_proba_features(&x))
    }

    /// Probabilities straight from an already-extracted feature vector.
    pub fn predict_proba_features(&self, features: &[f64]) -> Vec<f64> {
        self.targets
            .iter()
            .map(|t| sigmoid(t.raw_score(features, self.learning_rate)))
            .collect()
    }

    /// ON iff probability is strictly above the cutoff (ties are OFF).
    pub fn predict_states(
        &self,
        window: &WindowBatch,
        cutoff: f64,
    ) -> Result<ApplianceStateVector, GbdtError> {
        let probs = self.predict_proba(window)?;
        Ok(ApplianceStateVector::new(
            self.targets
                .iter()
                .zip(probs)
                .map(|(t, p)| (t.target_id.clone(), p > cutoff))
                .collect(),
        ))
    }
}
