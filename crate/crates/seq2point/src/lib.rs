//! Cloud-side Seq2Point disaggregator: per-feature convolutional
//! encoders feeding a multi-head self-attention block, read out at the
//! window midpoint, trained by minimizing the mean Bernoulli negative
//! log-likelihood with reverse-mode differentiation.

pub mod graph;
pub mod io;
pub mod model;
pub mod train;

use thiserror::Error;

pub use graph::{Graph, NodeId};
pub use model::{Architecture, S2PModel};
pub use train::{train, S2PTrainConfig};

#[derive(Debug, Error)]
pub enum S2pError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("state error: {0}")]
    State(String),
    #[error("model format error at {position}: {message}")]
    Format { position: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
