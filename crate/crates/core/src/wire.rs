//! Newline-delimited JSON transport shared by the external reasoner and the
//! external embedding service.
//!
//! Every request is one JSON object on one line carrying an `"id"` field; the
//! peer answers with one line echoing that id. Endpoints are either a TCP
//! address (`tcp://host:port`) or a subprocess (`exec:program arg...`) that
//! speaks the protocol on stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireConfig {
    /// `tcp://host:port` or `exec:program args...`.
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    4
}

impl WireConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no response within {0} ms")]
    Timeout(u64),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("bad endpoint `{0}`")]
    BadEndpoint(String),
}

enum Endpoint {
    Tcp(String),
    Process(Mutex<Option<ProcessPeer>>, Vec<String>),
}

struct ProcessPeer {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for ProcessPeer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct WireClient {
    config: WireConfig,
    endpoint: Endpoint,
    next_id: AtomicU64,
    in_flight: InFlight,
}

impl WireClient {
    pub fn new(config: WireConfig) -> Result<Self, WireError> {
        let endpoint = if let Some(addr) = config.endpoint.strip_prefix("tcp://") {
            Endpoint::Tcp(addr.to_string())
        } else if let Some(cmd) = config.endpoint.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(WireError::BadEndpoint(config.endpoint.clone()));
            }
            Endpoint::Process(Mutex::new(None), argv)
        } else {
            return Err(WireError::BadEndpoint(config.endpoint.clone()));
        };
        let in_flight = InFlight {
            limit: config.max_in_flight.max(1),
            count: Mutex::new(0),
            freed: Condvar::new(),
        };
        Ok(Self {
            config,
            endpoint,
            next_id: AtomicU64::new(1),
            in_flight,
        })
    }

    pub fn config(&self) -> &WireConfig {
        &self.config
    }

    /// Sends `body` (with a fresh `"id"`) and returns the peer's reply object.
    pub fn call(&self, mut body: Map<String, Value>) -> Result<Map<String, Value>, WireError> {
        let _slot = self.in_flight.acquire();
        let id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        body.insert("id".into(), Value::String(id.clone()));
        let mut line = serde_json::to_string(&body).expect("json object serializes");
        line.push('\n');
        let timeout = Duration::from_millis(self.config.timeout_ms);

        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let result = match &self.endpoint {
                Endpoint::Tcp(addr) => tcp_round_trip(addr, &line, &id, timeout),
                Endpoint::Process(peer, argv) => {
                    process_round_trip(peer, argv, &line, &id, timeout)
                }
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(attempt, %msg, "wire attempt failed");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(20 * attempt as u64));
                    }
                }
            }
        }
        Err(WireError::Transport {
            attempts,
            message: last,
        })
    }
}

enum Attempt {
    Retry(String),
    Fatal(WireError),
}

fn parse_reply(text: &str, id: &str) -> Result<Option<Map<String, Value>>, WireError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| WireError::Malformed(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(WireError::Malformed("reply is not a JSON object".into()));
    };
    match obj.get("id").and_then(Value::as_str) {
        Some(got) if got == id => Ok(Some(obj)),
        Some(_) => Ok(None),
        None => Err(WireError::Malformed("reply lacks `id`".into())),
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    )
}

fn tcp_round_trip(
    addr: &str,
    line: &str,
    id: &str,
    timeout: Duration,
) -> Result<Map<String, Value>, Attempt> {
    let sock = addr
        .to_socket_addrs()
        .map_err(|e| Attempt::Fatal(WireError::BadEndpoint(format!("{addr}: {e}"))))?
        .next()
        .ok_or_else(|| Attempt::Fatal(WireError::BadEndpoint(addr.to_string())))?;
    let mut stream =
        TcpStream::connect_timeout(&sock, timeout).map_err(|e| Attempt::Retry(e.to_string()))?;
    stream
        .set_read_timeout(Some(timeout))
        .and_then(|_| stream.set_write_timeout(Some(timeout)))
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    stream
        .write_all(line.as_bytes())
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let deadline = Instant::now() + timeout;
    let mut reader = BufReader::new(stream);
    loop {
        let mut buf = String::new();
        match reader.read_line(&mut buf) {
            Ok(0) => return Err(Attempt::Retry("connection closed before reply".into())),
            Ok(_) => {
                if let Some(obj) = parse_reply(buf.trim(), id).map_err(Attempt::Fatal)? {
                    return Ok(obj);
                }
                if Instant::now() >= deadline {
                    return Err(Attempt::Fatal(WireError::Timeout(
                        timeout.as_millis() as u64
                    )));
                }
            }
            Err(e) if is_timeout(&e) => {
                return Err(Attempt::Fatal(WireError::Timeout(
                    timeout.as_millis() as u64
                )))
            }
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        }
    }
}

fn spawn_peer(argv: &[String]) -> std::io::Result<ProcessPeer> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    Ok(ProcessPeer {
        child,
        stdin,
        lines: rx,
    })
}

fn process_round_trip(
    peer: &Mutex<Option<ProcessPeer>>,
    argv: &[String],
    line: &str,
    id: &str,
    timeout: Duration,
) -> Result<Map<String, Value>, Attempt> {
    let mut guard = peer.lock().unwrap();
    if guard.is_none() {
        *guard = Some(spawn_peer(argv).map_err(|e| Attempt::Retry(e.to_string()))?);
    }
    let p = guard.as_mut().unwrap();
    if let Err(e) = p
        .stdin
        .write_all(line.as_bytes())
        .and_then(|_| p.stdin.flush())
    {
        *guard = None;
        return Err(Attempt::Retry(e.to_string()));
    }
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match p.lines.recv_timeout(left) {
            Ok(Ok(text)) => {
                // replies to earlier, timed-out requests are skipped
                if let Some(obj) = parse_reply(text.trim(), id).map_err(Attempt::Fatal)? {
                    return Ok(obj);
                }
            }
            Ok(Err(e)) => {
                *guard = None;
                return Err(Attempt::Retry(e.to_string()));
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(Attempt::Fatal(WireError::Timeout(
                    timeout.as_millis() as u64
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                return Err(Attempt::Retry("peer process exited".into()));
            }
        }
    }
}
