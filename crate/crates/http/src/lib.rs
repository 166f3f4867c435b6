//! A deliberately small HTTP/1.1 implementation: one request per
//! connection, Content-Length bodies only (no chunked encoding), and
//! `Connection: close` on every response. Enough for the worker REST
//! API, the reverse proxy, and the load generator.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

pub const MAX_HEADER_BYTES: usize = 16 * 1024;
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    /// Decoded query parameters in order of appearance.
    pub query: Vec<(String, String)>,
    /// Header names lowercased.
    pub headers: HashMap<String, String>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn query_param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn body_str(&self) -> Result<&str, HttpError> {
        std::str::from_utf8(&self.body)
            .map_err(|_| HttpError::BadRequest("body is not UTF-8".into()))
    }
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
    pub content_type: String,
}

impl Response {
    pub fn json(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Self { status, body: body.into(), content_type: "application/json".into() }
    }

    pub fn reason(status: u16) -> &'static str {
        match status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            405 => "Method Not Allowed",
            500 => "Internal Server Error",
            502 => "Bad Gateway",
            503 => "Service Unavailable",
            _ => "Unknown",
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(
            w,
            "HTTP/1.1 {} {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.status,
            Self::reason(self.status),
            self.content_type,
            self.body.len()
        )?;
        w.write_all(&self.body)?;
        w.flush()
    }
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                let hex = bytes.get(i + 1..i + 3).and_then(|h| {
                    std::str::from_utf8(h).ok().and_then(|h| u8::from_str_radix(h, 16).ok())
                });
                match hex {
                    Some(b) => {
                        out.push(b);
                        i += 3;
                    }
                    None => {
                        out.push(b'%');
                        i += 1;
                    }
                }
            }
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn parse_query(raw: &str) -> Vec<(String, String)> {
    raw.split('&')
        .filter(|part| !part.is_empty())
        .map(|part| match part.split_once('=') {
            Some((k, v)) => (percent_decode(k), percent_decode(v)),
            None => (percent_decode(part), String::new()),
        })
        .collect()
}

fn read_head<R: BufRead>(r: &mut R) -> Result<Vec<String>, HttpError> {
    let mut lines = Vec::new();
    let mut total = 0usize;
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(HttpError::BadRequest("connection closed mid-head".into()));
        }
        total += n;
        if total > MAX_HEADER_BYTES {
            return Err(HttpError::BadRequest("headers too large".into()));
        }
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            return Ok(lines);
        }
        lines.push(trimmed.to_string());
    }
}

fn parse_headers(lines: &[String]) -> Result<HashMap<String, String>, HttpError> {
    let mut headers = HashMap::new();
    for line in lines {
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| HttpError::BadRequest(format!("bad header line {line:?}")))?;
        headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    Ok(headers)
}

fn read_body<R: BufRead>(
    r: &mut R,
    headers: &HashMap<String, String>,
) -> Result<Vec<u8>, HttpError> {
    let len = match headers.get("content-length") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| HttpError::BadRequest("bad Content-Length".into()))?,
        None => 0,
    };
    if len > MAX_BODY_BYTES {
        return Err(HttpError::BadRequest("body too large".into()));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn read_request<R: BufRead>(r: &mut R) -> Result<Request, HttpError> {
    let lines = read_head(r)?;
    let request_line = lines
        .first()
        .ok_or_else(|| HttpError::BadRequest("empty request".into()))?;
    let mut parts = request_line.split(' ');
    let (method, target, version) = match (parts.next(), parts.next(), parts.next(), parts.next())
    {
        (Some(m), Some(t), Some(v), None) => (m, t, v),
        _ => return Err(HttpError::BadRequest(format!("bad request line {request_line:?}"))),
    };
    if version != "HTTP/1.1" && version != "HTTP/1.0" {
        return Err(HttpError::BadRequest(format!("unsupported version {version:?}")));
    }
    let (path, query) = match target.split_once('?') {
        Some((p, q)) => (p.to_string(), parse_query(q)),
        None => (target.to_string(), Vec::new()),
    };
    let headers = parse_headers(&lines[1..])?;
    let body = read_body(r, &headers)?;
    Ok(Request { method: method.to_string(), path, query, headers, body })
}

pub type Handler = Arc<dyn Fn(&Request) -> Response + Send + Sync>;

pub struct HttpServer {
    shutdown: Arc<AtomicBool>,
    pub addr: SocketAddr,
}

impl HttpServer {
    /// Binds and serves in background threads. At most
    /// `max_connections` requests are serviced concurrently; excess
    /// connections get an immediate 503.
    pub fn start(listen: &str, max_connections: usize, handler: Handler) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let active = Arc::new(AtomicUsize::new(0));
        {
            let shutdown = Arc::clone(&shutdown);
            thread::spawn(move || {
                while !shutdown.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let _ = stream.set_nodelay(true);
                            let handler = Arc::clone(&handler);
                            let active = Arc::clone(&active);
                            if active.fetch_add(1, Ordering::SeqCst) >= max_connections {
                                active.fetch_sub(1, Ordering::SeqCst);
                                thread::spawn(move || {
                                    let mut stream = stream;
                                    let _ = Response::json(503, br#"{"error":"overloaded"}"#.to_vec())
                                        .write_to(&mut stream);
                                });
                                continue;
                            }
                            thread::spawn(move || {
                                serve_one(stream, &handler);
                                active.fetch_sub(1, Ordering::SeqCst);
                            });
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            // short poll so per-connection accept latency
                            // stays well under a millisecond on average
                            thread::sleep(Duration::from_micros(500));
                        }
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            });
        }
        Ok(Self { shutdown, addr })
    }

    pub fn stop(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_one(stream: TcpStream, handler: &Handler) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut stream = stream;
    let response = match read_request(&mut reader) {
        Ok(request) => handler(&request),
        Err(HttpError::BadRequest(msg)) => {
            Response::json(400, format!("{{\"error\":{}}}", json_string(&msg)))
        }
        Err(_) => return,
    };
    let _ = response.write_to(&mut stream);
}

/// Minimal JSON string escaping for error messages.
fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// One-shot client request over a fresh connection.
pub fn request(
    addr: &str,
    method: &str,
    target: &str,
    body: Option<&[u8]>,
) -> Result<(u16, Vec<u8>), HttpError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    request_over(stream, method, target, body)
}

/// Sends a request on an existing connection and reads the response.
pub fn request_over(
    mut stream: TcpStream,
    method: &str,
    target: &str,
    body: Option<&[u8]>,
) -> Result<(u16, Vec<u8>), HttpError> {
    let body = body.unwrap_or(&[]);
    write!(
        stream,
        "{method} {target} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let lines = read_head(&mut reader).map_err(|e| match e {
        HttpError::BadRequest(m) => HttpError::BadResponse(m),
        e => e,
    })?;
    let status_line = lines
        .first()
        .ok_or_else(|| HttpError::BadResponse("empty response".into()))?;
    let status = status_line
        .split(' ')
        .nth(1)
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| HttpError::BadResponse(format!("bad status line {status_line:?}")))?;
    let headers = parse_headers(&lines[1..]).map_err(|e| match e {
        HttpError::BadRequest(m) => HttpError::BadResponse(m),
        e => e,
    })?;
    let body = match headers.get("content-length") {
        Some(_) => read_body(&mut reader, &headers).map_err(|e| match e {
            HttpError::BadRequest(m) => HttpError::BadResponse(m),
            e => e,
        })?,
        None => {
            // Connection: close delimits the body
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf)?;
            buf
        }
    };
    Ok((status, body))
}
