//! Message-queue middleware for the edge-to-cloud pipeline: named FIFO
//! queues with bounded capacity, producer backpressure, and
//! acknowledged at-least-once delivery over plain TCP. Frames are a
//! u32 big-endian length prefix followed by a UTF-8 JSON body.

pub mod client;
pub mod server;
pub mod wire;

use thiserror::Error;

pub use client::{BrokerClient, Subscriber};
pub use server::{Broker, DEFAULT_CAPACITY};
pub use wire::{EdgeResultRecord, MessageEnvelope, SampleRecord};

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The broker replied with an ERROR frame.
    #[error("broker error [{code}]: {detail}")]
    Remote { code: String, detail: String },
    #[error("connection closed")]
    Closed,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
