//! Closed-loop load harness: fixed pools of virtual users hammer one
//! HTTP endpoint, pooling per-request latencies across repetitions
//! into per-concurrency statistics, plus a saturation sweep that walks
//! concurrency upward until the error rate exceeds 1%.

use std::net::TcpStream;
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One request shape sent by every virtual user.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RequestTemplate {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default)]
    pub body: Option<String>,
}

fn default_method() -> String {
    "GET".into()
}

fn default_path() -> String {
    "/v1/health".into()
}

impl Default for RequestTemplate {
    fn default() -> Self {
        Self { method: default_method(), path: default_path(), body: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoadProfile {
    #[serde(default = "default_levels")]
    pub levels: Vec<usize>,
    #[serde(default = "default_think")]
    pub think_time_s: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Requests each virtual user sends per repetition.
    #[serde(default = "default_requests_per_user")]
    pub requests_per_user: usize,
    #[serde(default)]
    pub request: RequestTemplate,
}

fn default_levels() -> Vec<usize> {
    vec![1, 3, 5, 10, 30, 50, 100]
}

fn default_think() -> f64 {
    2.0
}

fn default_repetitions() -> usize {
    10
}

fn default_requests_per_user() -> usize {
    1
}

impl Default for LoadProfile {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            think_time_s: default_think(),
            repetitions: default_repetitions(),
            requests_per_user: default_requests_per_user(),
            request: RequestTemplate::default(),
        }
    }
}

impl LoadProfile {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.levels.is_empty() {
            return Err(BenchError::Profile("levels must be nonempty".into()));
        }
        if self.levels.contains(&0) {
            return Err(BenchError::Profile("levels must be positive".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BenchError::Profile("levels must be strictly ascending".into()));
        }
        if self.think_time_s.is_nan() || self.think_time_s < 0.0 {
            return Err(BenchError::Profile("think time must be >= 0".into()));
        }
        if self.repetitions == 0 || self.requests_per_user == 0 {
            return Err(BenchError::Profile(
                "repetitions and requests per user must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelStats {
    pub concurrency: usize,
    pub average_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
    pub throughput_tps: f64,
    pub errors: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct LatencyReport {
    pub levels: Vec<LevelStats>,
}

/// Strips an `http://` scheme and splits off the path, returning the
/// socket address and the path prefix (empty when the URL has none).
pub fn parse_target(url: &str) -> Result<(String, String), BenchError> {
    let rest = url.strip_prefix("http://").unwrap_or(url);
    let (addr, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, ""),
    };
    if addr.is_empty() || !addr.contains(':') {
        return Err(BenchError::Input(format!("target must be host:port, got {url:?}")));
    }
    let path = if path == "/" { "" } else { path };
    Ok((addr.to_string(), path.to_string()))
}

/// Nearest-rank percentile: the value at 1-based index ceil(p/100 * n)
/// of the ascending sort.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Input("percentile of empty samples".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(BenchError::Input(format!("percentile p must be in (0, 100], got {p}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

struct Sink {
    latencies_ms: Vec<f64>,
    errors: u64,
    completed: u64,
}

fn one_repetition(
    addr: &str,
    template: &RequestTemplate,
    concurrency: usize,
    requests_per_user: usize,
    think: Duration,
) -> (Sink, Duration) {
    let sink = Arc::new(Mutex::new(Sink { latencies_ms: Vec::new(), errors: 0, completed: 0 }));
    // burst start: all users released together
    let barrier = Arc::new(Barrier::new(concurrency + 1));
    let mut handles = Vec::with_capacity(concurrency);
    for _ in 0..concurrency {
        let sink = Arc::clone(&sink);
        let barrier = Arc::clone(&barrier);
        let addr = addr.to_string();
        let template = template.clone();
        handles.push(thread::spawn(move || {
            barrier.wait();
            for i in 0..requests_per_user {
                let started = Instant::now();
                let outcome = nilm_http::request(
                    &addr,
                    &template.method,
                    &template.path,
                    template.body.as_deref().map(str::as_bytes),
                );
                let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
                {
                    let mut sink = sink.lock().unwrap();
                    sink.latencies_ms.push(elapsed_ms);
                    match outcome {
                        Ok((status, _)) => {
                            sink.completed += 1;
                            if !(200..300).contains(&status) {
                                sink.errors += 1;
                            }
                        }
                        Err(_) => sink.errors += 1,
                    }
                }
                // think time after response, not after the final request
                if i + 1 < requests_per_user && !think.is_zero() {
                    thread::sleep(think);
                }
            }
        }));
    }
    barrier.wait();
    let started = Instant::now();
    for h in handles {
        let _ = h.join();
    }
    let wall = started.elapsed();
    let sink = Arc::try_unwrap(sink).ok().expect("users joined").into_inner().unwrap();
    (sink, wall)
}

fn check_reachable(addr: &str) -> Result<(), BenchError> {
    let parsed: std::net::SocketAddr = addr
        .parse()
        .map_err(|_| BenchError::Unreachable(format!("{addr} is not a socket address")))?;
    TcpStream::connect_timeout(&parsed, Duration::from_secs(2))
        .map_err(|e| BenchError::Unreachable(format!("{addr}: {e}")))?;
    Ok(())
}

/// Runs the full concurrency sweep against `target` (a `host:port` or
/// `http://host:port/path` URL; a path in the URL prefixes the
/// template path). Samples from all repetitions of a level are pooled.
pub fn run_load(profile: &LoadProfile, target: &str) -> Result<LatencyReport, BenchError> {
    profile.validate()?;
    let (addr, prefix) = parse_target(target)?;
    check_reachable(&addr)?;
    let template = RequestTemplate {
        path: format!("{prefix}{}", profile.request.path),
        ..profile.request.clone()
    };
    let think = Duration::from_secs_f64(profile.think_time_s);

    let mut levels = Vec::with_capacity(profile.levels.len());
    for &concurrency in &profile.levels {
        let mut latencies = Vec::new();
        let mut errors = 0u64;
        let mut completed = 0u64;
        let mut wall = Duration::ZERO;
        for _ in 0..profile.repetitions {
            let (sink, rep_wall) =
                one_repetition(&addr, &template, concurrency, profile.requests_per_user, think);
            latencies.extend(sink.latencies_ms);
            errors += sink.errors;
            completed += sink.completed;
            wall += rep_wall;
        }
        levels.push(level_stats(concurrency, &latencies, errors, completed, wall)?);
        log::info!(
            "level {concurrency}: avg {:.1} ms, {errors} errors",
            levels.last().unwrap().average_ms
        );
    }
    Ok(LatencyReport { levels })
}

fn level_stats(
    concurrency: usize,
    latencies: &[f64],
    errors: u64,
    completed: u64,
    wall: Duration,
) -> Result<LevelStats, BenchError> {
    let average = latencies.iter().sum::<f64>() / latencies.len() as f64;
    let throughput = if wall.is_zero() { 0.0 } else { completed as f64 / wall.as_secs_f64() };
    Ok(LevelStats {
        concurrency,
        average_ms: average,
        median_ms: percentile(latencies, 50.0)?,
        p90_ms: percentile(latencies, 90.0)?,
        max_ms: percentile(latencies, 100.0)?,
        throughput_tps: throughput,
        errors,
    })
}

/// Per-level ratio of edge average latency over cloud average latency.
pub fn compare_reports(
    edge: &LatencyReport,
    cloud: &LatencyReport,
) -> Result<Vec<(usize, f64)>, BenchError> {
    let edge_levels: Vec<usize> = edge.levels.iter().map(|l| l.concurrency).collect();
    let cloud_levels: Vec<usize> = cloud.levels.iter().map(|l| l.concurrency).collect();
    if edge_levels != cloud_levels {
        return Err(BenchError::Input(format!(
            "concurrency levels differ: {edge_levels:?} vs {cloud_levels:?}"
        )));
    }
    Ok(edge
        .levels
        .iter()
        .zip(&cloud.levels)
        .map(|(e, c)| (e.concurrency, e.average_ms / c.average_ms))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" => Ok(Self::Markdown),
            other => Err(BenchError::Input(format!("format must be csv or markdown, got {other:?}"))),
        }
    }
}

const REPORT_COLUMNS: [&str; 7] =
    ["concurrency", "average_ms", "median_ms", "p90_ms", "max_ms", "throughput_tps", "errors"];

fn row_cells(level: &LevelStats) -> [String; 7] {
    [
        level.concurrency.to_string(),
        format!("{:.1}", level.average_ms),
        format!("{:.1}", level.median_ms),
        format!("{:.1}", level.p90_ms),
        format!("{:.1}", level.max_ms),
        format!("{:.1}", level.throughput_tps),
        level.errors.to_string(),
    ]
}

pub fn emit_report(report: &LatencyReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for level in &report.levels {
                out.push_str(&row_cells(level).join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str(&format!("| {} |\n", REPORT_COLUMNS.join(" | ")));
            out.push_str(&format!("|{}\n", " --- |".repeat(REPORT_COLUMNS.len())));
            for level in &report.levels {
                out.push_str(&format!("| {} |\n", row_cells(level).join(" | ")));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SaturationRow {
    pub concurrency: usize,
    pub requests: u64,
    pub errors: u64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SaturationReport {
    pub rows: Vec<SaturationRow>,
    /// Highest tested concurrency whose error rate stayed <= 1%.
    pub threshold: Option<usize>,
    /// First tested concurrency whose error rate exceeded 1%, if any.
    pub first_failing: Option<usize>,
}

/// Raises concurrency from `start` by `step` up to `max`, one
/// repetition (one request per user, no think time) per level, and
/// stops at the first level whose error rate exceeds 1%.
pub fn saturate(
    target: &str,
    template: &RequestTemplate,
    start: usize,
    step: usize,
    max: usize,
) -> Result<SaturationReport, BenchError> {
    if start == 0 || step == 0 || max < start {
        return Err(BenchError::Input("need start >= 1, step >= 1, max >= start".into()));
    }
    let (addr, prefix) = parse_target(target)?;
    check_reachable(&addr)?;
    let template = RequestTemplate { path: format!("{prefix}{}", template.path), ..template.clone() };

    let mut report = SaturationReport::default();
    let mut concurrency = start;
    while concurrency <= max {
        let (sink, _) = one_repetition(&addr, &template, concurrency, 1, Duration::ZERO);
        let requests = sink.latencies_ms.len() as u64;
        let rate = sink.errors as f64 / requests as f64;
        report.rows.push(SaturationRow {
            concurrency,
            requests,
            errors: sink.errors,
            error_rate: rate,
        });
        log::info!("saturate {concurrency}: {}/{requests} errors", sink.errors);
        if rate > 0.01 {
            report.first_failing = Some(concurrency);
            break;
        }
        report.threshold = Some(concurrency);
        concurrency += step;
    }
    Ok(report)
}
