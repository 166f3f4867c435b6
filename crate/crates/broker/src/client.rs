//! Synchronous broker client: request/response for declare/publish,
//! and a streaming subscriber for consumption.

use std::net::TcpStream;
use std::time::Duration;

use serde_json::{json, Value};

use crate::wire::{read_frame, write_frame};
use crate::BrokerError;

pub struct BrokerClient {
    stream: TcpStream,
}

fn remote(frame: &Value) -> BrokerError {
    BrokerError::Remote {
        code: frame.get("code").and_then(Value::as_str).unwrap_or("unknown").to_string(),
        detail: frame.get("detail").and_then(Value::as_str).unwrap_or("").to_string(),
    }
}

fn expect_ok(frame: Value) -> Result<(), BrokerError> {
    match frame.get("op").and_then(Value::as_str) {
        Some("OK") => Ok(()),
        Some("ERROR") => Err(remote(&frame)),
        other => Err(BrokerError::Protocol(format!("unexpected reply op {other:?}"))),
    }
}

impl BrokerClient {
    pub fn connect(addr: &str) -> Result<Self, BrokerError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    fn request(&mut self, body: Value) -> Result<Value, BrokerError> {
        write_frame(&mut self.stream, &body)?;
        read_frame(&mut self.stream)
    }

    pub fn declare(&mut self, queue: &str, capacity: Option<usize>) -> Result<(), BrokerError> {
        let mut body = json!({"op": "DECLARE", "queue": queue});
        if let Some(c) = capacity {
            body["capacity"] = json!(c);
        }
        expect_ok(self.request(body)?)
    }

    /// Publishes one envelope (any JSON value). Overflow and routing
    /// failures surface as `BrokerError::Remote`.
    pub fn publish(&mut self, queue: &str, envelope: &Value) -> Result<(), BrokerError> {
        expect_ok(self.request(json!({"op": "PUBLISH", "queue": queue, "envelope": envelope}))?)
    }

    /// Converts this connection into a delivery stream.
    pub fn subscribe(mut self, queue: &str, prefetch: u64) -> Result<Subscriber, BrokerError> {
        expect_ok(self.request(json!({"op": "SUBSCRIBE", "queue": queue, "prefetch": prefetch}))?)?;
        Ok(Subscriber { stream: self.stream })
    }
}

pub struct Subscriber {
    stream: TcpStream,
}

impl Subscriber {
    /// Blocks for the next delivery. With a read timeout set, a quiet
    /// queue returns `Ok(None)` at the deadline.
    #[allow(clippy::should_implement_trait)] // fallible, so not Iterator
    pub fn next(&mut self) -> Result<Option<(u64, Value)>, BrokerError> {
        let frame = match read_frame(&mut self.stream) {
            Ok(f) => f,
            Err(BrokerError::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        match frame.get("op").and_then(Value::as_str) {
            Some("DELIVER") => {
                let tag = frame
                    .get("tag")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| BrokerError::Protocol("DELIVER without tag".into()))?;
                let envelope = frame
                    .get("envelope")
                    .cloned()
                    .ok_or_else(|| BrokerError::Protocol("DELIVER without envelope".into()))?;
                Ok(Some((tag, envelope)))
            }
            Some("ERROR") => Err(remote(&frame)),
            other => Err(BrokerError::Protocol(format!("unexpected frame op {other:?}"))),
        }
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<(), BrokerError> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn ack(&mut self, tag: u64) -> Result<(), BrokerError> {
        write_frame(&mut self.stream, &json!({"op": "ACK", "tag": tag}))
    }

    pub fn nack(&mut self, tag: u64) -> Result<(), BrokerError> {
        write_frame(&mut self.stream, &json!({"op": "NACK", "tag": tag}))
    }
}
