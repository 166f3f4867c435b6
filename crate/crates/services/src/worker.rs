//! Cloud inference worker: REST endpoints over the Seq2Point model and
//! the shared result store. Inference is serialized through one model
//! lock per worker process.

use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use nilm_core::preprocess::FEATURES;
use nilm_core::WindowBatch;
use nilm_http::{Handler, HttpServer, Request, Response};
use nilm_seq2point::S2PModel;

use crate::config::{CloudConfig, ResultRecord, TargetResult};
use crate::persist::ResultStore;
use crate::ServiceError;

pub const S2P_MODEL_VERSION: &str = "s2p-1";

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as i64
}

struct WorkerState {
    model: Arc<Mutex<S2PModel>>,
    store: Arc<ResultStore>,
    cutoff: f64,
    synthetic_delay: Duration,
    name: String,
}

pub struct Worker {
    server: HttpServer,
    state: Arc<WorkerState>,
    pub addr: std::net::SocketAddr,
}

impl Worker {
    /// Loads the model, opens the store, and starts serving. The
    /// consume loop is started separately (see `consumer`).
    pub fn start(cfg: &CloudConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let model = Arc::new(Mutex::new(nilm_seq2point::io::load(&cfg.s2p_model_path)?));
        let store = Arc::new(ResultStore::open(&cfg.persist_dir)?);
        Self::start_with(cfg, model, store)
    }

    /// The model mutex is shared so a co-located consume loop
    /// serializes against the REST endpoint.
    pub fn start_with(
        cfg: &CloudConfig,
        model: Arc<Mutex<S2PModel>>,
        store: Arc<ResultStore>,
    ) -> Result<Self, ServiceError> {
        let state = Arc::new(WorkerState {
            model,
            store,
            cutoff: cfg.state_cutoff,
            synthetic_delay: Duration::from_millis(cfg.synthetic_delay_ms),
            name: if cfg.worker_name.is_empty() {
                cfg.listen.clone()
            } else {
                cfg.worker_name.clone()
            },
        });
        let handler_state = Arc::clone(&state);
        let handler: Handler = Arc::new(move |req: &Request| handle(&handler_state, req));
        let server = HttpServer::start(&cfg.listen, cfg.max_connections, handler)?;
        let addr = server.addr;
        Ok(Self { server, state, addr })
    }

    pub fn store(&self) -> Arc<ResultStore> {
        Arc::clone(&self.state.store)
    }

    pub fn model(&self) -> Arc<Mutex<S2PModel>> {
        Arc::clone(&self.state.model)
    }

    pub fn stop(&self) {
        self.server.stop();
    }
}

fn handle(state: &WorkerState, req: &Request) -> Response {
    match (req.method.as_str(), req.path.as_str()) {
        ("POST", "/v1/infer") => infer(state, req),
        ("GET", "/v1/result/latest") => latest(state, req),
        ("GET", "/v1/results") => results(state, req),
        ("GET", "/v1/health") => Response::json(
            200,
            json!({"status": "ok", "worker": state.name}).to_string(),
        ),
        ("GET", _) | ("POST", _) => Response::json(404, r#"{"error":"no such endpoint"}"#),
        _ => Response::json(405, r#"{"error":"method not allowed"}"#),
    }
}

fn bad_request(msg: &str) -> Response {
    Response::json(400, json!({"error": msg}).to_string())
}

fn targets_json(targets: &[TargetResult]) -> Value {
    Value::Array(
        targets
            .iter()
            .map(|t| json!({"id": t.id, "prob": t.prob, "state": t.state}))
            .collect(),
    )
}

fn infer(state: &WorkerState, req: &Request) -> Response {
    let body: Value = match req.body_str().ok().and_then(|s| serde_json::from_str(s).ok()) {
        Some(v) => v,
        None => return bad_request("body must be JSON"),
    };
    let Some(household_id) = body.get("household_id").and_then(Value::as_str) else {
        return bad_request("missing household_id");
    };
    match body.get("mode").and_then(Value::as_str) {
        Some("cloud-infer") => {}
        Some("edge-lookup") => return latest_for(state, household_id),
        _ => return bad_request("mode must be \"cloud-infer\" or \"edge-lookup\""),
    }
    let Some(rows) = body.get("window").and_then(Value::as_array) else {
        return bad_request("missing window");
    };
    let (expected_len, target_names) = {
        let model = state.model.lock().unwrap();
        (model.window_len, model.targets.clone())
    };
    if rows.len() != expected_len {
        return bad_request(&format!("window must have {expected_len} rows"));
    }
    let mut values = Vec::with_capacity(rows.len() * FEATURES);
    for row in rows {
        let pair = row.as_array().filter(|r| r.len() == FEATURES).and_then(|r| {
            Some([r[0].as_f64()?, r[1].as_f64()?])
        });
        match pair {
            Some([p, q]) => values.extend([p, q]),
            None => return bad_request("window rows must be [p,q] number pairs"),
        }
    }
    let window = WindowBatch {
        values,
        window_len: rows.len(),
        feature_dim: FEATURES,
        start_ts_ms: 0,
        end_ts_ms: 0,
        household_id: household_id.to_string(),
    };

    let probs = {
        // single model instance per worker: inference is serialized,
        // and the synthetic service time counts as inference time
        let model = state.model.lock().unwrap();
        if !state.synthetic_delay.is_zero() {
            std::thread::sleep(state.synthetic_delay);
        }
        match model.forward(std::slice::from_ref(&window)) {
            Ok(mut batches) => batches.remove(0),
            Err(e) => return bad_request(&format!("inference failed: {e}")),
        }
    };
    let targets: Vec<TargetResult> = target_names
        .iter()
        .zip(&probs)
        .map(|(id, &prob)| TargetResult {
            id: id.clone(),
            prob,
            state: u8::from(prob > state.cutoff),
        })
        .collect();
    Response::json(
        200,
        json!({"ts_ms": now_ms(), "targets": targets_json(&targets)}).to_string(),
    )
}

fn record_response(rec: &ResultRecord) -> Response {
    Response::json(
        200,
        json!({
            "ts_ms": rec.ts_ms,
            "targets": targets_json(&rec.targets),
            "producer": rec.producer,
        })
        .to_string(),
    )
}

fn latest_for(state: &WorkerState, household_id: &str) -> Response {
    match state.store.latest(household_id, Some("edge")) {
        Ok(Some(rec)) => record_response(&rec),
        Ok(None) => Response::json(404, r#"{"error":"no stored result"}"#),
        Err(e) => Response::json(500, json!({"error": e.to_string()}).to_string()),
    }
}

fn latest(state: &WorkerState, req: &Request) -> Response {
    match req.query_param("household_id") {
        Some(h) => latest_for(state, h),
        None => bad_request("missing household_id"),
    }
}

fn results(state: &WorkerState, req: &Request) -> Response {
    let Some(household) = req.query_param("household_id") else {
        return bad_request("missing household_id");
    };
    let parse = |name: &str, default: i64| -> Result<i64, Response> {
        match req.query_param(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_request(&format!("bad {name}"))),
        }
    };
    let from = match parse("from", i64::MIN) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let to = match parse("to", i64::MAX) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match state.store.query(household, from, to) {
        Ok(records) => {
            let body = json!({
                "records": records
                    .iter()
                    .map(|r| serde_json::to_value(r).expect("record serializes"))
                    .collect::<Vec<_>>(),
            });
            Response::json(200, body.to_string())
        }
        Err(e) => Response::json(500, json!({"error": e.to_string()}).to_string()),
    }
}
