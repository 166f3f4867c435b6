//! Cloud-side consume loop: unpack envelopes, rebuild sliding windows
//! per household, run batched inference at the batch threshold, and
//! ack only after results are persisted.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::sync::Mutex;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::Value;

use nilm_broker::{BrokerClient, MessageEnvelope};
use nilm_core::{WindowBatch, WindowQueue};
use nilm_seq2point::S2PModel;

use crate::config::{CloudConfig, ResultRecord, TargetResult};
use crate::persist::ResultStore;
use crate::worker::S2P_MODEL_VERSION;
use crate::ServiceError;

pub const EDGE_MODEL_VERSION: &str = "gbdt-1";

struct HouseholdState {
    queue: WindowQueue,
    /// Seqs already applied, for at-least-once dedup.
    seen_seqs: HashSet<u64>,
    /// Windows awaiting the batch threshold.
    pending_windows: Vec<WindowBatch>,
    /// Unacked envelopes in arrival order: (tag, last sample ts).
    unacked: VecDeque<(u64, i64)>,
}

pub struct ConsumerHandle {
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<Result<ConsumerStats, ServiceError>>>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ConsumerStats {
    pub envelopes: u64,
    pub duplicates: u64,
    pub dead_lettered: u64,
    pub batches: u64,
    pub results_persisted: u64,
}

impl ConsumerHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(mut self) -> Result<ConsumerStats, ServiceError> {
        self.stop();
        match self.join.take() {
            Some(h) => h.join().map_err(|_| ServiceError::Persist("consumer panicked".into()))?,
            None => Ok(ConsumerStats::default()),
        }
    }
}

impl Drop for ConsumerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Spawns the consume loop. Exactly one consumer should run per queue;
/// windowing assumes it sees every envelope of a household in order.
pub fn start_consumer(
    cfg: &CloudConfig,
    model: Arc<Mutex<S2PModel>>,
    store: Arc<ResultStore>,
) -> Result<ConsumerHandle, ServiceError> {
    cfg.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    let cfg = cfg.clone();
    let stop2 = Arc::clone(&stop);
    let join = thread::Builder::new()
        .name("cloud-consumer".into())
        .spawn(move || consume_loop(&cfg, model, store, &stop2))?;
    Ok(ConsumerHandle { stop, join: Some(join) })
}

fn consume_loop(
    cfg: &CloudConfig,
    model: Arc<Mutex<S2PModel>>,
    store: Arc<ResultStore>,
    stop: &AtomicBool,
) -> Result<ConsumerStats, ServiceError> {
    let mut declare = BrokerClient::connect(&cfg.broker_addr)?;
    declare.declare(&cfg.queue, None)?;
    let dead_queue = format!("{}.dead", cfg.queue);
    declare.declare(&dead_queue, None)?;
    let mut dead_publisher = declare;

    let mut sub = BrokerClient::connect(&cfg.broker_addr)?.subscribe(&cfg.queue, 256)?;
    sub.set_timeout(Some(Duration::from_millis(200)))?;

    let window_len = model.lock().unwrap().window_len;
    let mut households: HashMap<String, HouseholdState> = HashMap::new();
    let mut stats = ConsumerStats::default();

    while !stop.load(Ordering::SeqCst) {
        let Some((tag, raw)) = sub.next()? else {
            continue;
        };
        stats.envelopes += 1;
        let envelope = match MessageEnvelope::from_value(&raw) {
            Ok(env) if envelope_shape_ok(&env) => env,
            _ => {
                // malformed: divert to the dead-letter queue, then ack
                // so it never blocks the stream
                stats.dead_lettered += 1;
                if let Err(e) = dead_publisher.publish(&dead_queue, &raw) {
                    log::warn!("dead-letter publish failed: {e}");
                }
                sub.ack(tag)?;
                continue;
            }
        };

        let hh = households.entry(envelope.household_id.clone()).or_insert_with(|| {
            HouseholdState {
                queue: WindowQueue::new(window_len, envelope.household_id.clone())
                    .expect("window_len validated at model load"),
                seen_seqs: HashSet::new(),
                pending_windows: Vec::new(),
                unacked: VecDeque::new(),
            }
        });

        if !hh.seen_seqs.insert(envelope.seq) {
            // redelivered duplicate: its effects are already persisted
            stats.duplicates += 1;
            sub.ack(tag)?;
            continue;
        }

        let flush = envelope.eos == Some(true);
        let last_ts = envelope.samples.last().map(|s| s.ts);
        for s in &envelope.samples {
            if let Some(window) = hh
                .queue
                .push_features(s.ts, [s.p, s.q])
                .map_err(|e| ServiceError::Persist(e.to_string()))?
            {
                hh.pending_windows.push(window);
            }
        }
        // piggybacked edge results persist as producer=edge records
        if let Some(edge_results) = &envelope.edge_results {
            let mut by_ts: HashMap<i64, Vec<TargetResult>> = HashMap::new();
            for r in edge_results {
                by_ts.entry(r.ts_ms).or_default().push(TargetResult {
                    id: r.target_id.clone(),
                    prob: r.prob,
                    state: r.state,
                });
            }
            for (ts_ms, targets) in by_ts {
                let written = store.append(&ResultRecord {
                    household_id: envelope.household_id.clone(),
                    ts_ms,
                    targets,
                    producer: "edge".into(),
                    model_version: EDGE_MODEL_VERSION.into(),
                })?;
                if written {
                    stats.results_persisted += 1;
                }
            }
        }
        hh.unacked.push_back((tag, last_ts.unwrap_or(i64::MIN)));

        while hh.pending_windows.len() >= cfg.batch_threshold {
            let batch: Vec<WindowBatch> =
                hh.pending_windows.drain(..cfg.batch_threshold).collect();
            run_batch(&model, &store, cfg, &batch, &mut stats)?;
            ack_through(&mut sub, hh, batch.last().unwrap().end_ts_ms)?;
        }
        if flush {
            if !hh.pending_windows.is_empty() {
                let batch: Vec<WindowBatch> = hh.pending_windows.drain(..).collect();
                run_batch(&model, &store, cfg, &batch, &mut stats)?;
            }
            // eos: everything seen so far is persisted
            ack_through(&mut sub, hh, i64::MAX)?;
        }
    }
    Ok(stats)
}

fn envelope_shape_ok(env: &MessageEnvelope) -> bool {
    if env.household_id.is_empty() {
        return false;
    }
    if env.eos == Some(true) {
        return env.samples.is_empty();
    }
    !env.samples.is_empty()
}

fn run_batch(
    model: &Arc<Mutex<S2PModel>>,
    store: &ResultStore,
    cfg: &CloudConfig,
    batch: &[WindowBatch],
    stats: &mut ConsumerStats,
) -> Result<(), ServiceError> {
    // one batched forward per threshold crossing; the lock serializes
    // against the REST endpoint on the same worker
    let (probs, targets) = {
        let model = model.lock().unwrap();
        (model.forward(batch)?, model.targets.clone())
    };
    stats.batches += 1;
    for (window, window_probs) in batch.iter().zip(probs) {
        let record = ResultRecord {
            household_id: window.household_id.clone(),
            ts_ms: (window.start_ts_ms + window.end_ts_ms) / 2,
            targets: targets
                .iter()
                .zip(&window_probs)
                .map(|(id, &prob)| TargetResult {
                    id: id.clone(),
                    prob,
                    state: u8::from(prob > cfg.state_cutoff),
                })
                .collect(),
            producer: "cloud".into(),
            model_version: S2P_MODEL_VERSION.into(),
        };
        if store.append(&record)? {
            stats.results_persisted += 1;
        }
    }
    Ok(())
}

/// Acks every envelope whose samples are fully covered by persisted
/// windows (last sample ts at or before the last persisted window's
/// end).
fn ack_through(
    sub: &mut nilm_broker::Subscriber,
    hh: &mut HouseholdState,
    persisted_end_ts: i64,
) -> Result<(), ServiceError> {
    while let Some(&(tag, last_ts)) = hh.unacked.front() {
        if last_ts <= persisted_end_ts {
            sub.ack(tag)?;
            hh.unacked.pop_front();
        } else {
            break;
        }
    }
    Ok(())
}

/// Test hook: raw dead-letter drain.
pub fn drain_queue(addr: &str, queue: &str, wait: Duration) -> Result<Vec<Value>, ServiceError> {
    let mut sub = BrokerClient::connect(addr)?.subscribe(queue, 64)?;
    sub.set_timeout(Some(wait))?;
    let mut out = Vec::new();
    while let Some((tag, v)) = sub.next()? {
        sub.ack(tag)?;
        out.push(v);
    }
    Ok(out)
}
