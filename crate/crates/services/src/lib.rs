//! The three-tier runtime: an edge agent that cleans and forwards
//! measurements (optionally running the compact tree model locally), a
//! cloud consumer that batches windows through the Seq2Point model and
//! persists results, REST workers exposing those results, and a
//! round-robin reverse proxy in front of the worker pool.

pub mod balancer;
pub mod config;
pub mod consumer;
pub mod edge_agent;
pub mod persist;
pub mod worker;

use thiserror::Error;

pub use balancer::Balancer;
pub use config::{load_config, AgentMode, BalancerConfig, CloudConfig, EdgeAgentConfig,
    InputSource, ResultRecord, TargetResult};
pub use consumer::{start_consumer, ConsumerHandle};
pub use edge_agent::{run_edge_agent, EdgeAgentStats};
pub use persist::ResultStore;
pub use worker::Worker;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("broker error: {0}")]
    Broker(#[from] nilm_broker::BrokerError),
    #[error("core error: {0}")]
    Core(#[from] nilm_core::CoreError),
    #[error("http error: {0}")]
    Http(#[from] nilm_http::HttpError),
    #[error("persistence error: {0}")]
    Persist(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<nilm_gbdt::GbdtError> for ServiceError {
    fn from(e: nilm_gbdt::GbdtError) -> Self {
        ServiceError::Model(e.to_string())
    }
}

impl From<nilm_seq2point::S2pError> for ServiceError {
    fn from(e: nilm_seq2point::S2pError) -> Self {
        ServiceError::Model(e.to_string())
    }
}
