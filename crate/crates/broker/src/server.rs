//! The broker process: queue state, TCP accept loop, and per
//! connection protocol handling.
//!
//! Every queue operation runs under one broker-wide lock, so per-queue
//! operations are linearizable. A subscription spawns a delivery
//! thread that pushes DELIVER frames while the connection's reader
//! keeps handling ACK/NACK frames; writes to the socket share a mutex.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::wire::{error_frame, ok_frame, read_frame, write_frame};
use crate::BrokerError;

pub const DEFAULT_CAPACITY: usize = 10_000;
pub const DEFAULT_PREFETCH: u64 = 64;

struct InFlight {
    conn_id: u64,
    envelope: Value,
}

struct QueueState {
    capacity: usize,
    buffer: VecDeque<Value>,
    in_flight: HashMap<u64, InFlight>,
    next_tag: u64,
}

impl QueueState {
    fn new(capacity: usize) -> Self {
        Self { capacity, buffer: VecDeque::new(), in_flight: HashMap::new(), next_tag: 1 }
    }
}

#[derive(Default)]
struct Shared {
    queues: HashMap<String, QueueState>,
}

pub struct Broker {
    state: Mutex<Shared>,
    cond: Condvar,
    default_capacity: usize,
    next_conn_id: AtomicU64,
    shutdown: AtomicBool,
}

impl Broker {
    pub fn new(default_capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(Shared::default()),
            cond: Condvar::new(),
            default_capacity,
            next_conn_id: AtomicU64::new(1),
            shutdown: AtomicBool::new(false),
        })
    }

    /// Binds, spawns the accept loop, and returns the bound address.
    /// Pass port 0 to bind an ephemeral port.
    pub fn start(self: &Arc<Self>, listen: &str) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let broker = Arc::clone(self);
        thread::spawn(move || broker.accept_loop(listener));
        Ok(addr)
    }

    pub fn stop(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _guard = self.state.lock().unwrap();
        self.cond.notify_all();
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        while !self.shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    let broker = Arc::clone(&self);
                    thread::spawn(move || broker.serve_connection(stream));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    }

    fn declare(&self, name: &str, capacity: usize) -> Result<(), (String, String)> {
        if name.is_empty() {
            return Err(("bad-declare".into(), "queue name must be nonempty".into()));
        }
        let mut state = self.state.lock().unwrap();
        match state.queues.get(name) {
            Some(q) if q.capacity == capacity => Ok(()),
            Some(q) => Err((
                "capacity-conflict".into(),
                format!("queue {name} already declared with capacity {}", q.capacity),
            )),
            None => {
                state.queues.insert(name.to_string(), QueueState::new(capacity));
                Ok(())
            }
        }
    }

    fn publish(&self, queue: &str, envelope: Value) -> Result<(), (String, String)> {
        let mut state = self.state.lock().unwrap();
        let q = state
            .queues
            .get_mut(queue)
            .ok_or_else(|| ("unknown-queue".to_string(), format!("queue {queue} not declared")))?;
        if q.buffer.len() >= q.capacity {
            return Err(("overflow".into(), format!("queue {queue} is at capacity")));
        }
        q.buffer.push_back(envelope);
        self.cond.notify_all();
        Ok(())
    }

    fn ack(&self, queue: &str, tag: u64, conn_id: u64) -> Result<(), (String, String)> {
        let mut state = self.state.lock().unwrap();
        let q = state
            .queues
            .get_mut(queue)
            .ok_or_else(|| ("unknown-queue".to_string(), format!("queue {queue} not declared")))?;
        match q.in_flight.get(&tag) {
            Some(m) if m.conn_id == conn_id => {
                q.in_flight.remove(&tag);
                self.cond.notify_all();
                Ok(())
            }
            _ => Err(("unknown-tag".into(), format!("tag {tag} not in flight here"))),
        }
    }

    fn nack(&self, queue: &str, tag: u64, conn_id: u64) -> Result<(), (String, String)> {
        let mut state = self.state.lock().unwrap();
        let q = state
            .queues
            .get_mut(queue)
            .ok_or_else(|| ("unknown-queue".to_string(), format!("queue {queue} not declared")))?;
        match q.in_flight.get(&tag) {
            Some(m) if m.conn_id == conn_id => {
                let m = q.in_flight.remove(&tag).unwrap();
                q.buffer.push_back(m.envelope);
                self.cond.notify_all();
                Ok(())
            }
            _ => Err(("unknown-tag".into(), format!("tag {tag} not in flight here"))),
        }
    }

    /// Returns a connection's unacked messages to the buffer front, in
    /// delivery order, so redelivery preserves FIFO.
    fn release_connection(&self, conn_id: u64) {
        let mut state = self.state.lock().unwrap();
        for q in state.queues.values_mut() {
            let mut tags: Vec<u64> = q
                .in_flight
                .iter()
                .filter(|(_, m)| m.conn_id == conn_id)
                .map(|(&tag, _)| tag)
                .collect();
            tags.sort_unstable();
            for tag in tags.into_iter().rev() {
                let m = q.in_flight.remove(&tag).unwrap();
                q.buffer.push_front(m.envelope);
            }
        }
        self.cond.notify_all();
    }

    fn serve_connection(self: Arc<Self>, stream: TcpStream) {
        let conn_id = self.next_conn_id.fetch_add(1, Ordering::SeqCst);
        let mut reader = match stream.try_clone() {
            Ok(s) => s,
            Err(e) => {
                log::warn!("clone failed: {e}");
                return;
            }
        };
        let writer = Arc::new(Mutex::new(stream));
        let closed = Arc::new(AtomicBool::new(false));
        let mut subscription: Option<String> = None;

        loop {
            let frame = match read_frame(&mut reader) {
                Ok(f) => f,
                Err(BrokerError::Closed) => break,
                Err(e) => {
                    log::debug!("connection {conn_id} read error: {e}");
                    break;
                }
            };
            let reply = self.handle_frame(
                &frame,
                conn_id,
                &mut subscription,
                &writer,
                &closed,
            );
            if let Some(reply) = reply {
                let mut w = writer.lock().unwrap();
                if write_frame(&mut *w, &reply).is_err() {
                    break;
                }
            }
        }

        closed.store(true, Ordering::SeqCst);
        self.release_connection(conn_id);
    }

    /// Processes one request frame; returns an optional reply frame.
    fn handle_frame(
        self: &Arc<Self>,
        frame: &Value,
        conn_id: u64,
        subscription: &mut Option<String>,
        writer: &Arc<Mutex<TcpStream>>,
        closed: &Arc<AtomicBool>,
    ) -> Option<Value> {
        let op = frame.get("op").and_then(Value::as_str).unwrap_or("");
        match op {
            "DECLARE" => {
                let name = frame.get("queue").and_then(Value::as_str).unwrap_or("");
                let capacity = frame
                    .get("capacity")
                    .and_then(Value::as_u64)
                    .map(|c| c as usize)
                    .unwrap_or(self.default_capacity);
                Some(match self.declare(name, capacity) {
                    Ok(()) => ok_frame(),
                    Err((code, detail)) => error_frame(&code, &detail),
                })
            }
            "PUBLISH" => {
                let queue = frame.get("queue").and_then(Value::as_str).unwrap_or("");
                let Some(envelope) = frame.get("envelope") else {
                    return Some(error_frame("bad-publish", "missing envelope"));
                };
                Some(match self.publish(queue, envelope.clone()) {
                    Ok(()) => ok_frame(),
                    Err((code, detail)) => error_frame(&code, &detail),
                })
            }
            "SUBSCRIBE" => {
                if subscription.is_some() {
                    return Some(error_frame("bad-subscribe", "already subscribed"));
                }
                let queue = frame.get("queue").and_then(Value::as_str).unwrap_or("").to_string();
                let prefetch =
                    frame.get("prefetch").and_then(Value::as_u64).unwrap_or(DEFAULT_PREFETCH);
                if prefetch == 0 {
                    return Some(error_frame("bad-subscribe", "prefetch must be positive"));
                }
                {
                    let state = self.state.lock().unwrap();
                    if !state.queues.contains_key(&queue) {
                        return Some(error_frame(
                            "unknown-queue",
                            &format!("queue {queue} not declared"),
                        ));
                    }
                }
                *subscription = Some(queue.clone());
                // confirm before the delivery thread can write, so the
                // subscriber always sees OK first
                {
                    let mut w = writer.lock().unwrap();
                    if write_frame(&mut *w, &ok_frame()).is_err() {
                        closed.store(true, Ordering::SeqCst);
                        return None;
                    }
                }
                let broker = Arc::clone(self);
                let writer = Arc::clone(writer);
                let closed = Arc::clone(closed);
                thread::spawn(move || broker.delivery_loop(queue, prefetch, conn_id, writer, closed));
                None
            }
            "ACK" | "NACK" => {
                let Some(queue) = subscription.clone() else {
                    return Some(error_frame("bad-ack", "not subscribed"));
                };
                let Some(tag) = frame.get("tag").and_then(Value::as_u64) else {
                    return Some(error_frame("bad-ack", "missing tag"));
                };
                let result = if op == "ACK" {
                    self.ack(&queue, tag, conn_id)
                } else {
                    self.nack(&queue, tag, conn_id)
                };
                match result {
                    Ok(()) => None, // acks are not individually confirmed
                    Err((code, detail)) => Some(error_frame(&code, &detail)),
                }
            }
            other => Some(error_frame("bad-op", &format!("unsupported op {other:?}"))),
        }
    }

    fn delivery_loop(
        self: Arc<Self>,
        queue: String,
        prefetch: u64,
        conn_id: u64,
        writer: Arc<Mutex<TcpStream>>,
        closed: Arc<AtomicBool>,
    ) {
        loop {
            let (tag, envelope) = {
                let mut state = self.state.lock().unwrap();
                loop {
                    if closed.load(Ordering::SeqCst) || self.shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    let q = match state.queues.get_mut(&queue) {
                        Some(q) => q,
                        None => return,
                    };
                    let unacked =
                        q.in_flight.values().filter(|m| m.conn_id == conn_id).count() as u64;
                    if !q.buffer.is_empty() && unacked < prefetch {
                        let envelope = q.buffer.pop_front().unwrap();
                        let tag = q.next_tag;
                        q.next_tag += 1;
                        q.in_flight.insert(tag, InFlight { conn_id, envelope: envelope.clone() });
                        break (tag, envelope);
                    }
                    let (guard, _) =
                        self.cond.wait_timeout(state, Duration::from_millis(200)).unwrap();
                    state = guard;
                }
            };
            let frame = json!({"op": "DELIVER", "tag": tag, "envelope": envelope});
            let failed = {
                let mut w = writer.lock().unwrap();
                write_frame(&mut *w, &frame).is_err()
            };
            if failed {
                // reader thread notices the close and releases in-flight
                closed.store(true, Ordering::SeqCst);
                return;
            }
        }
    }
}
