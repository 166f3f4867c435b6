//! Round-robin reverse proxy over the worker pool with TCP health
//! probes: strict rotation over healthy workers, bytewise proxying in
//! both directions, 502 when the pool is empty.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use nilm_http::Response;

use crate::config::BalancerConfig;
use crate::ServiceError;

pub const UNHEALTHY_AFTER_FAILURES: u32 = 3;

struct WorkerSlot {
    addr: String,
    healthy: AtomicBool,
    consecutive_failures: AtomicUsize,
}

struct BalancerState {
    workers: Vec<WorkerSlot>,
    next: Mutex<usize>,
}

impl BalancerState {
    /// Strict round robin over healthy workers; None when all are down.
    fn route_next(&self) -> Option<String> {
        let mut next = self.next.lock().unwrap();
        for _ in 0..self.workers.len() {
            let slot = &self.workers[*next % self.workers.len()];
            *next = (*next + 1) % self.workers.len();
            if slot.healthy.load(Ordering::SeqCst) {
                return Some(slot.addr.clone());
            }
        }
        None
    }

    fn probe_all(&self, timeout: Duration) {
        for slot in &self.workers {
            let ok = slot
                .addr
                .parse::<SocketAddr>()
                .ok()
                .and_then(|a| TcpStream::connect_timeout(&a, timeout).ok())
                .is_some();
            if ok {
                slot.consecutive_failures.store(0, Ordering::SeqCst);
                slot.healthy.store(true, Ordering::SeqCst);
            } else {
                let fails = slot.consecutive_failures.fetch_add(1, Ordering::SeqCst) + 1;
                if fails as u32 >= UNHEALTHY_AFTER_FAILURES {
                    slot.healthy.store(false, Ordering::SeqCst);
                }
            }
        }
    }
}

pub struct Balancer {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    state: Arc<BalancerState>,
}

impl Balancer {
    pub fn start(cfg: &BalancerConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let listener = TcpListener::bind(&cfg.listen)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;

        let state = Arc::new(BalancerState {
            workers: cfg
                .workers
                .iter()
                .map(|addr| WorkerSlot {
                    addr: addr.clone(),
                    // optimistic start; the first probe corrects it
                    healthy: AtomicBool::new(true),
                    consecutive_failures: AtomicUsize::new(0),
                })
                .collect(),
            next: Mutex::new(0),
        });
        let shutdown = Arc::new(AtomicBool::new(false));

        {
            let state = Arc::clone(&state);
            let shutdown = Arc::clone(&shutdown);
            let period = Duration::from_millis(cfg.health_check_period_ms);
            thread::spawn(move || {
                while !shutdown.load(Ordering::SeqCst) {
                    state.probe_all(Duration::from_millis(250));
                    thread::sleep(period);
                }
            });
        }
        {
            let state = Arc::clone(&state);
            let shutdown = Arc::clone(&shutdown);
            thread::spawn(move || accept_loop(listener, state, shutdown));
        }
        Ok(Self { addr, shutdown, state })
    }

    pub fn stop(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }

    /// Exposed for tests: the address the next request would go to.
    pub fn route_next(&self) -> Option<String> {
        self.state.route_next()
    }

    /// Force one immediate probe round (tests).
    pub fn probe_now(&self) {
        self.state.probe_all(Duration::from_millis(250));
    }
}

impl Drop for Balancer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, state: Arc<BalancerState>, shutdown: Arc<AtomicBool>) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((client, _)) => {
                let _ = client.set_nodelay(true);
                let state = Arc::clone(&state);
                thread::spawn(move || proxy_connection(client, &state));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("balancer accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn proxy_connection(mut client: TcpStream, state: &BalancerState) {
    let upstream = state.route_next().and_then(|addr| {
        TcpStream::connect(&addr)
            .map_err(|e| log::warn!("upstream {addr} connect failed: {e}"))
            .ok()
    });
    let Some(upstream) = upstream else {
        let _ = Response::json(502, br#"{"error":"no healthy workers"}"#.to_vec())
            .write_to(&mut client);
        return;
    };
    let _ = upstream.set_nodelay(true);

    // bytewise, both directions, until EOF each way
    let (mut cr, mut cw) = match (client.try_clone(), client) {
        (Ok(r), w) => (r, w),
        (Err(_), _) => return,
    };
    let (mut ur, mut uw) = match (upstream.try_clone(), upstream) {
        (Ok(r), w) => (r, w),
        (Err(_), _) => return,
    };
    let up = thread::spawn(move || {
        copy_then_shutdown(&mut cr, &mut uw);
    });
    copy_then_shutdown(&mut ur, &mut cw);
    let _ = up.join();
}

fn copy_then_shutdown(from: &mut TcpStream, to: &mut TcpStream) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}
