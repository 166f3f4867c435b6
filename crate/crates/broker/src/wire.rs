//! Wire-level types: the envelope schema and frame framing.
//!
//! Frame = u32 big-endian body length + UTF-8 JSON body {"op": ...}.
//! Envelope serialization is canonical: fields emit in declaration
//! order with no whitespace, so a round trip is byte-identical.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::BrokerError;

/// Refuse absurd frames before allocating.
pub const MAX_FRAME_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub ts: i64,
    pub p: f64,
    pub q: f64,
}

/// Edge-produced result carried piggyback on the envelope when the
/// agent runs in edge-infer mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeResultRecord {
    pub ts_ms: i64,
    pub target_id: String,
    pub prob: f64,
    pub state: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub household_id: String,
    pub seq: u64,
    pub sent_at_ms: i64,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_results: Option<Vec<EdgeResultRecord>>,
    /// End-of-stream marker: carries no samples and asks the consumer
    /// to flush any partial batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<bool>,
}

impl MessageEnvelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, BrokerError> {
        serde_json::from_str(text).map_err(|e| BrokerError::Protocol(format!("bad envelope: {e}")))
    }

    pub fn from_value(value: &Value) -> Result<Self, BrokerError> {
        serde_json::from_value(value.clone())
            .map_err(|e| BrokerError::Protocol(format!("bad envelope: {e}")))
    }
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Value, BrokerError> {
    let mut len_buf = [0u8; 4];
    if let Err(e) = r.read_exact(&mut len_buf) {
        return match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Err(BrokerError::Closed),
            _ => Err(e.into()),
        };
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_BYTES {
        return Err(BrokerError::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| BrokerError::Protocol(format!("bad frame: {e}")))
}

pub fn write_frame<W: Write>(w: &mut W, body: &Value) -> Result<(), BrokerError> {
    let bytes = serde_json::to_vec(body).expect("frame serialization cannot fail");
    let len = u32::try_from(bytes.len())
        .map_err(|_| BrokerError::Protocol("frame too large".into()))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn error_frame(code: &str, detail: &str) -> Value {
    serde_json::json!({"op": "ERROR", "code": code, "detail": detail})
}

pub fn ok_frame() -> Value {
    serde_json::json!({"op": "OK"})
}
