//! Config types for the three tiers, loadable from JSON files, plus
//! the persisted result record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nilm_core::datagen::ScenarioConfig;

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentMode {
    #[serde(rename = "edge-infer")]
    EdgeInfer,
    #[serde(rename = "forward-only")]
    ForwardOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum InputSource {
    /// Replay a measurement CSV.
    #[serde(rename = "csv")]
    Csv { path: PathBuf },
    /// Generate samples on the fly from a scenario.
    #[serde(rename = "live")]
    Live {
        scenario: ScenarioConfig,
        /// Pace emission at this rate; absent means as fast as possible.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_hz: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeAgentConfig {
    pub input: InputSource,
    pub broker_addr: String,
    pub queue: String,
    pub household_id: String,
    pub mode: AgentMode,
    /// Sliding window length W.
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gbdt_model_path: Option<PathBuf>,
    /// Local store for edge-produced results (edge-infer mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_dir: Option<PathBuf>,
    #[serde(default = "default_cutoff")]
    pub state_cutoff: f64,
    /// Samples carried per published envelope.
    #[serde(default = "default_samples_per_envelope")]
    pub samples_per_envelope: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudConfig {
    pub broker_addr: String,
    pub queue: String,
    /// Batch threshold B: windows accumulated per household before one
    /// batched forward pass.
    #[serde(default = "default_batch_threshold")]
    pub batch_threshold: usize,
    pub s2p_model_path: PathBuf,
    pub persist_dir: PathBuf,
    /// REST listen address, e.g. "127.0.0.1:8080".
    pub listen: String,
    /// Run the queue-consume loop in this worker (exactly one worker
    /// per queue should).
    #[serde(default = "default_true")]
    pub consume: bool,
    #[serde(default = "default_max_connections")]
    pub max_connections: usize,
    /// Artificial service time added inside the inference lock, for
    /// load experiments.
    #[serde(default)]
    pub synthetic_delay_ms: u64,
    #[serde(default = "default_cutoff")]
    pub state_cutoff: f64,
    /// Name reported by /v1/health.
    #[serde(default)]
    pub worker_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancerConfig {
    pub listen: String,
    /// Ordered worker pool, "host:port" each.
    pub workers: Vec<String>,
    #[serde(default = "default_health_period_ms")]
    pub health_check_period_ms: u64,
}

fn default_window_len() -> usize {
    31
}
fn default_cutoff() -> f64 {
    0.5
}
fn default_samples_per_envelope() -> usize {
    8
}
fn default_batch_threshold() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_max_connections() -> usize {
    64
}
fn default_health_period_ms() -> u64 {
    1000
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ServiceError::Config(format!("bad config {}: {e}", path.display())))
}

impl EdgeAgentConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.mode == AgentMode::EdgeInfer && self.gbdt_model_path.is_none() {
            return Err(ServiceError::Config("edge-infer mode requires a model path".into()));
        }
        if self.window_len < 1 {
            return Err(ServiceError::Config("window length must be positive".into()));
        }
        if self.samples_per_envelope == 0 {
            return Err(ServiceError::Config("samples_per_envelope must be positive".into()));
        }
        Ok(())
    }
}

impl CloudConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.batch_threshold < 1 {
            return Err(ServiceError::Config("batch threshold must be >= 1".into()));
        }
        Ok(())
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers.is_empty() {
            return Err(ServiceError::Config("balancer needs at least one worker".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub id: String,
    pub prob: f64,
    pub state: u8,
}

/// One persisted disaggregation result for a household at a midpoint
/// timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub household_id: String,
    /// Midpoint timestamp of the source window.
    pub ts_ms: i64,
    pub targets: Vec<TargetResult>,
    /// "edge" or "cloud".
    pub producer: String,
    pub model_version: String,
}

impl ResultRecord {
    pub fn validate(&self) -> Result<(), ServiceError> {
        for t in &self.targets {
            if !(0.0..=1.0).contains(&t.prob) {
                return Err(ServiceError::Persist(format!(
                    "probability {} out of range for target {}",
                    t.prob, t.id
                )));
            }
            if t.state > 1 {
                return Err(ServiceError::Persist(format!("bad state for target {}", t.id)));
            }
        }
        if self.producer != "edge" && self.producer != "cloud" {
            return Err(ServiceError::Persist(format!("bad producer {:?}", self.producer)));
        }
        Ok(())
    }
}
