//! Edge agent: clean the measurement stream, optionally run the
//! compact tree model locally, and publish the cleaned samples to the
//! broker as enveloped batches with strictly increasing seq.

use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use nilm_broker::{BrokerClient, BrokerError, EdgeResultRecord, MessageEnvelope, SampleRecord};
use nilm_core::preprocess::{self, FEATURES};
use nilm_core::{PowerSample, WindowQueue};
use nilm_gbdt::GbdtModel;

use crate::config::{AgentMode, EdgeAgentConfig, InputSource, ResultRecord, TargetResult};
use crate::consumer::EDGE_MODEL_VERSION;
use crate::persist::ResultStore;
use crate::ServiceError;

pub const CONNECT_ATTEMPTS: u32 = 6;
pub const CONNECT_BACKOFF_BASE_MS: u64 = 100;

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct EdgeAgentStats {
    pub samples_in: u64,
    pub rejected: u64,
    pub samples_published: u64,
    pub envelopes_published: u64,
    pub local_results: u64,
}

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as i64
}

/// Connects with exponential backoff; gives up after a bounded number
/// of attempts.
pub fn connect_with_retry(addr: &str) -> Result<BrokerClient, ServiceError> {
    let mut delay = Duration::from_millis(CONNECT_BACKOFF_BASE_MS);
    let mut last: Option<BrokerError> = None;
    for attempt in 0..CONNECT_ATTEMPTS {
        match BrokerClient::connect(addr) {
            Ok(c) => return Ok(c),
            Err(e) => {
                log::warn!("broker connect attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
        }
        thread::sleep(delay);
        delay *= 2;
    }
    Err(last.map(ServiceError::Broker).unwrap_or_else(|| {
        ServiceError::Config("broker unreachable".into())
    }))
}

fn load_input(cfg: &EdgeAgentConfig) -> Result<(Vec<PowerSample>, Option<Duration>), ServiceError> {
    match &cfg.input {
        InputSource::Csv { path } => Ok((nilm_core::datagen::read_csv(path)?, None)),
        InputSource::Live { scenario, rate_hz } => {
            let samples = nilm_core::datagen::generate_scenario(scenario)?;
            let pace = rate_hz
                .filter(|r| *r > 0.0)
                .map(|r| Duration::from_secs_f64(1.0 / r));
            Ok((samples, pace))
        }
    }
}

/// Runs the agent to input exhaustion, then publishes an end-of-stream
/// marker and returns counters.
pub fn run_edge_agent(cfg: &EdgeAgentConfig) -> Result<EdgeAgentStats, ServiceError> {
    cfg.validate()?;
    let model: Option<GbdtModel> = match (cfg.mode, &cfg.gbdt_model_path) {
        (AgentMode::EdgeInfer, Some(path)) => Some(nilm_gbdt::io::load(path)?),
        _ => None,
    };
    let local_store = match (&model, &cfg.results_dir) {
        (Some(_), Some(dir)) => Some(ResultStore::open(dir)?),
        _ => None,
    };
    let (samples, pace) = load_input(cfg)?;

    let mut client = connect_with_retry(&cfg.broker_addr)?;
    client.declare(&cfg.queue, None)?;

    let mut stats = EdgeAgentStats { samples_in: samples.len() as u64, ..Default::default() };
    let mut window_queue = WindowQueue::new(cfg.window_len, cfg.household_id.clone())
        .map_err(ServiceError::Core)?;
    let mut seq: u64 = 1;
    let mut batch: Vec<SampleRecord> = Vec::with_capacity(cfg.samples_per_envelope);
    let mut batch_edge_results: Vec<EdgeResultRecord> = Vec::new();

    for sample in &samples {
        if let Some(pace) = pace {
            thread::sleep(pace);
        }
        if !preprocess::is_valid(sample) {
            stats.rejected += 1;
            continue;
        }
        let p = sample.active_power.expect("validated");
        let q = sample.reactive_power.expect("validated");
        debug_assert_eq!(FEATURES, 2);

        if let Some(model) = &model {
            if let Some(window) = window_queue
                .push_features(sample.ts_ms, [p, q])
                .map_err(ServiceError::Core)?
            {
                let probs = model.predict_proba(&window).map_err(ServiceError::from)?;
                let ts_ms = (window.start_ts_ms + window.end_ts_ms) / 2;
                let targets: Vec<TargetResult> = model
                    .targets
                    .iter()
                    .zip(&probs)
                    .map(|(t, &prob)| TargetResult {
                        id: t.target_id.clone(),
                        prob,
                        state: u8::from(prob > cfg.state_cutoff),
                    })
                    .collect();
                for t in &targets {
                    batch_edge_results.push(EdgeResultRecord {
                        ts_ms,
                        target_id: t.id.clone(),
                        prob: t.prob,
                        state: t.state,
                    });
                }
                if let Some(store) = &local_store {
                    store.append(&ResultRecord {
                        household_id: cfg.household_id.clone(),
                        ts_ms,
                        targets,
                        producer: "edge".into(),
                        model_version: EDGE_MODEL_VERSION.into(),
                    })?;
                }
                stats.local_results += 1;
            }
        }

        batch.push(SampleRecord { ts: sample.ts_ms, p, q });
        if batch.len() >= cfg.samples_per_envelope {
            publish_batch(&mut client, cfg, &mut seq, &mut batch, &mut batch_edge_results, &mut stats)?;
        }
    }
    if !batch.is_empty() {
        publish_batch(&mut client, cfg, &mut seq, &mut batch, &mut batch_edge_results, &mut stats)?;
    }
    // end-of-stream marker so the consumer flushes partial batches
    let eos = MessageEnvelope {
        household_id: cfg.household_id.clone(),
        seq,
        sent_at_ms: now_ms(),
        samples: Vec::new(),
        edge_results: None,
        eos: Some(true),
    };
    client.publish(&cfg.queue, &serde_json::to_value(&eos).expect("envelope serializes"))?;
    Ok(stats)
}

fn publish_batch(
    client: &mut BrokerClient,
    cfg: &EdgeAgentConfig,
    seq: &mut u64,
    batch: &mut Vec<SampleRecord>,
    edge_results: &mut Vec<EdgeResultRecord>,
    stats: &mut EdgeAgentStats,
) -> Result<(), ServiceError> {
    let samples = std::mem::take(batch);
    let results = std::mem::take(edge_results);
    let n = samples.len() as u64;
    let envelope = MessageEnvelope {
        household_id: cfg.household_id.clone(),
        seq: *seq,
        sent_at_ms: now_ms(),
        samples,
        edge_results: if results.is_empty() { None } else { Some(results) },
        eos: None,
    };
    client.publish(&cfg.queue, &serde_json::to_value(&envelope).expect("envelope serializes"))?;
    *seq += 1;
    stats.samples_published += n;
    stats.envelopes_published += 1;
    Ok(())
}
