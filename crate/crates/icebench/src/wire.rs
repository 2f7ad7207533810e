//! The `icebench-scorer-v1` protocol: newline-delimited JSON over a child
//! process's standard streams or a TCP socket.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use icebench_core::scorer::{ModelAttribution, ScoreVector, Scorer, ScorerError, ScorerInfo};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL: &str = "icebench-scorer-v1";
pub const DEFAULT_HANDSHAKE_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_BATCH_SIZE: usize = 32;
const TRANSCRIPT_LINES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Score {
        id: u64,
        batch: Vec<Vec<String>>,
    },
    Attribute {
        id: u64,
        method: ModelAttribution,
        batch: Vec<Vec<String>>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Hello {
        protocol: String,
        classes: Vec<String>,
        probabilistic: bool,
        attention: bool,
        gradient: bool,
    },
    Score {
        id: u64,
        scores: Vec<Vec<f64>>,
    },
    Attribute {
        id: u64,
        scores: Vec<Vec<f64>>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Tcp(String),
    /// Shell command whose stdin/stdout carry the protocol.
    Command(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Self {
        match s.strip_prefix("tcp://") {
            Some(addr) => Endpoint::Tcp(addr.to_string()),
            None => Endpoint::Command(s.strip_prefix("cmd:").unwrap_or(s).to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub handshake_timeout_ms: u64,
    /// No limit when `None`.
    pub request_timeout_ms: Option<u64>,
    pub batch_size: usize,
    /// When set, the advertised class count must equal this.
    pub expected_classes: Option<usize>,
    pub name: Option<String>,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            handshake_timeout_ms: DEFAULT_HANDSHAKE_TIMEOUT_MS,
            request_timeout_ms: None,
            batch_size: DEFAULT_BATCH_SIZE,
            expected_classes: None,
            name: None,
        }
    }
}

struct Conn {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    transcript: VecDeque<String>,
}

impl Conn {
    fn note(&mut self, dir: &str, line: &str) {
        if self.transcript.len() == TRANSCRIPT_LINES {
            self.transcript.pop_front();
        }
        self.transcript.push_back(format!("{dir} {line}"));
    }

    fn transcript(&self) -> Vec<String> {
        self.transcript.iter().cloned().collect()
    }

    fn protocol(&self, message: impl Into<String>) -> ScorerError {
        ScorerError::Protocol {
            message: message.into(),
            transcript: self.transcript(),
        }
    }

    fn send(&mut self, req: &Request) -> Result<(), ScorerError> {
        let line = serde_json::to_string(req).expect("request serializes");
        self.note(">", &line);
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| ScorerError::Io(e.to_string()))
    }

    fn recv(&mut self, timeout_ms: Option<u64>, handshake: bool) -> Result<String, ScorerError> {
        let got = match timeout_ms {
            Some(ms) => match self.lines.recv_timeout(Duration::from_millis(ms)) {
                Ok(r) => Some(r),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(if handshake {
                        ScorerError::Timeout(ms)
                    } else {
                        self.protocol(format!("no response within {ms} ms"))
                    })
                }
                Err(RecvTimeoutError::Disconnected) => None,
            },
            None => self.lines.recv().ok(),
        };
        match got {
            Some(Ok(line)) => {
                self.note("<", &line);
                Ok(line)
            }
            Some(Err(e)) => Err(ScorerError::Io(e.to_string())),
            None => Err(self.protocol("scorer closed the connection")),
        }
    }

    fn parse(&self, line: &str) -> Result<Response, ScorerError> {
        serde_json::from_str(line).map_err(|e| self.protocol(format!("unparseable line {line:?}: {e}")))
    }
}

/// A scorer reached over the wire protocol.
pub struct ExternalScorer {
    info: ScorerInfo,
    conn: Mutex<Conn>,
    child: Mutex<Option<Child>>,
    next_id: AtomicU64,
    batch_size: usize,
    request_timeout_ms: Option<u64>,
    baseline: OnceLock<ScoreVector>,
}

impl std::fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalScorer").field("info", &self.info).finish_non_exhaustive()
    }
}

fn spawn_reader(reader: impl io::Read + Send + 'static) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut r = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match r.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    let line = line.trim_end_matches(['\n', '\r']).to_string();
                    if line.is_empty() {
                        continue;
                    }
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

/// Launches or dials the endpoint and performs the hello handshake.
pub fn connect_external(endpoint: &str, opts: &ConnectOptions) -> Result<ExternalScorer, ScorerError> {
    let (writer, lines, child): (Box<dyn Write + Send>, _, _) = match Endpoint::parse(endpoint) {
        Endpoint::Tcp(addr) => {
            let stream = TcpStream::connect(&addr).map_err(|e| ScorerError::Unreachable(format!("{addr}: {e}")))?;
            let read = stream.try_clone().map_err(|e| ScorerError::Io(e.to_string()))?;
            (Box::new(stream), spawn_reader(read), None)
        }
        Endpoint::Command(cmd) => {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| ScorerError::Unreachable(format!("{cmd}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (Box::new(stdin), spawn_reader(stdout), Some(child))
        }
    };
    let mut conn = Conn {
        writer,
        lines,
        transcript: VecDeque::new(),
    };
    let hello = handshake(&mut conn, opts);
    let info = match hello {
        Ok(info) => info,
        Err(e) => {
            if let Some(mut c) = child {
                let _ = c.kill();
                let _ = c.wait();
            }
            return Err(e);
        }
    };
    Ok(ExternalScorer {
        info,
        conn: Mutex::new(conn),
        child: Mutex::new(child),
        next_id: AtomicU64::new(1),
        batch_size: opts.batch_size.max(1),
        request_timeout_ms: opts.request_timeout_ms,
        baseline: OnceLock::new(),
    })
}

fn handshake(conn: &mut Conn, opts: &ConnectOptions) -> Result<ScorerInfo, ScorerError> {
    conn.send(&Request::Hello)?;
    let line = conn.recv(Some(opts.handshake_timeout_ms), true)?;
    match conn.parse(&line)? {
        Response::Hello {
            protocol,
            classes,
            probabilistic,
            attention,
            gradient,
        } => {
            if protocol != PROTOCOL {
                return Err(ScorerError::VersionMismatch(protocol));
            }
            if classes.len() < 2 {
                return Err(conn.protocol(format!("hello advertises {} classes", classes.len())));
            }
            if let Some(expected) = opts.expected_classes {
                if expected != classes.len() {
                    return Err(ScorerError::ClassMismatch {
                        expected,
                        got: classes.len(),
                    });
                }
            }
            Ok(ScorerInfo {
                name: opts.name.clone().unwrap_or_else(|| "external".to_string()),
                class_names: classes,
                is_probabilistic: probabilistic,
                supports_gradient: gradient,
                supports_attention: attention,
            })
        }
        Response::Error { message, .. } => Err(ScorerError::Remote(message)),
        _ => Err(conn.protocol(format!("expected hello, got {line:?}"))),
    }
}

impl ExternalScorer {
    fn call(&self, make: impl FnOnce(u64) -> Request, len: usize, class_count: Option<usize>) -> Result<Vec<Vec<f64>>, ScorerError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let req = make(id);
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.send(&req)?;
        let line = conn.recv(self.request_timeout_ms, false)?;
        let scores = match (conn.parse(&line)?, &req) {
            (Response::Score { id: rid, scores }, Request::Score { .. })
            | (Response::Attribute { id: rid, scores }, Request::Attribute { .. }) => {
                if rid != id {
                    return Err(conn.protocol(format!("response id {rid} does not match request {id}")));
                }
                scores
            }
            (Response::Error { message, .. }, _) => return Err(ScorerError::Remote(message)),
            _ => return Err(conn.protocol(format!("unexpected response {line:?}"))),
        };
        if scores.len() != len {
            return Err(ScorerError::BatchShape {
                expected: len,
                got: scores.len(),
            });
        }
        if let Some(c) = class_count {
            if let Some(bad) = scores.iter().find(|s| s.len() != c) {
                return Err(conn.protocol(format!("score vector has {} entries, expected {c}", bad.len())));
            }
        }
        if scores.iter().flatten().any(|x| !x.is_finite()) {
            return Err(conn.protocol("non-finite score"));
        }
        Ok(scores)
    }

    pub fn shutdown(&self) {
        if let Ok(mut conn) = self.conn.lock() {
            let _ = conn.send(&Request::Shutdown);
        }
        if let Ok(mut child) = self.child.lock() {
            if let Some(mut c) = child.take() {
                for _ in 0..50 {
                    if let Ok(Some(_)) = c.try_wait() {
                        return;
                    }
                    thread::sleep(Duration::from_millis(10));
                }
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Scorer for ExternalScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn score_batch(&self, batch: &[Vec<String>]) -> Result<Vec<ScoreVector>, ScorerError> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.batch_size) {
            let rows = self.call(
                |id| Request::Score {
                    id,
                    batch: chunk.to_vec(),
                },
                chunk.len(),
                Some(self.info.class_count()),
            )?;
            out.extend(rows.into_iter().map(ScoreVector::new));
        }
        Ok(out)
    }

    fn baseline(&self) -> Result<ScoreVector, ScorerError> {
        if let Some(b) = self.baseline.get() {
            return Ok(b.clone());
        }
        let b = self.score(&[])?;
        Ok(self.baseline.get_or_init(|| b).clone())
    }

    fn attribute(&self, method: ModelAttribution, tokens: &[String]) -> Result<Vec<f64>, ScorerError> {
        let supported = match method {
            ModelAttribution::Attention => self.info.supports_attention,
            ModelAttribution::Gradient => self.info.supports_gradient,
        };
        if !supported {
            return Err(ScorerError::Capability(method.as_str().to_string()));
        }
        let mut rows = self.call(
            |id| Request::Attribute {
                id,
                method,
                batch: vec![tokens.to_vec()],
            },
            1,
            None,
        )?;
        let row = rows.pop().expect("length checked");
        if row.len() != tokens.len() {
            return Err(ScorerError::BatchShape {
                expected: tokens.len(),
                got: row.len(),
            });
        }
        Ok(row)
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }
}

fn hello_for(info: &ScorerInfo) -> Response {
    Response::Hello {
        protocol: PROTOCOL.to_string(),
        classes: info.class_names.clone(),
        probabilistic: info.is_probabilistic,
        attention: info.supports_attention,
        gradient: info.supports_gradient,
    }
}

fn answer<S: Scorer + ?Sized>(scorer: &S, line: &str) -> Option<Response> {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return Some(Response::Error {
                id: None,
                message: format!("malformed request: {e}"),
            })
        }
    };
    let id = value.get("id").and_then(Value::as_u64);
    let req: Request = match serde_json::from_value(value.clone()) {
        Ok(r) => r,
        Err(e) => {
            let message = match value.get("type").and_then(Value::as_str) {
                Some(t @ ("hello" | "score" | "attribute" | "shutdown")) => format!("bad {t} request: {e}"),
                Some(t) => format!("unknown message type {t:?}"),
                None => "message has no type".to_string(),
            };
            return Some(Response::Error { id, message });
        }
    };
    let err = |id: u64, e: ScorerError| Response::Error {
        id: Some(id),
        message: e.to_string(),
    };
    Some(match req {
        Request::Hello => hello_for(scorer.info()),
        Request::Shutdown => return None,
        Request::Score { id, batch } => match scorer.score_batch(&batch) {
            Ok(s) => Response::Score {
                id,
                scores: s.into_iter().map(|v| v.per_class().to_vec()).collect(),
            },
            Err(e) => err(id, e),
        },
        Request::Attribute { id, method, batch } => {
            match batch.iter().map(|t| scorer.attribute(method, t)).collect() {
                Ok(scores) => Response::Attribute { id, scores },
                Err(e) => err(id, e),
            }
        }
    })
}

/// Answers requests until `shutdown` or end of input.
pub fn serve<S: Scorer + ?Sized>(scorer: &S, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(resp) = answer(scorer, &line) else {
            break;
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
