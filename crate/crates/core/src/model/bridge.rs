//! Client for externally served models.
//!
//! Frames are single lines of JSON. Requests carry `id`, `method` and
//! method-specific fields; responses are `{"ok": true, "data": ...}` or
//! `{"ok": false, "code": ..., "message": ...}`. Tensors travel as base64 of
//! little-endian `f32`, channel-major.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{Classifier, Direction, ImageEmbedder};
use crate::error::{Error, Result};
use crate::image::{Image, InputShape};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("peer closed the connection")]
    Closed,
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol version mismatch: peer speaks {got}, expected {PROTOCOL_VERSION}")]
    VersionMismatch { got: u64 },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("peer error {code}: {message}")]
    Remote { code: String, message: String },
}

/// Where the peer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// Program and arguments; the peer talks over its stdin/stdout.
    Command(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    /// `tcp:HOST:PORT` selects TCP; anything else (optionally prefixed with
    /// `cmd:`) is a whitespace-separated command line.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp:") {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        let cmd = s.strip_prefix("cmd:").unwrap_or(s);
        let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err(crate::error::invalid("empty bridge endpoint"));
        }
        Ok(Endpoint::Command(argv))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

/// The peer's answer to `info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub protocol_version: u64,
    pub classes: Vec<String>,
    pub has_input_gradient: bool,
    pub has_embeddings: bool,
    pub input: InputShape,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
    timeout: Duration,
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self, TransportError> {
        let (tx, rx) = mpsc::channel();
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| TransportError::Connect(format!("{addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let reader = stream.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
                spawn_reader(reader, tx);
                Ok(Self { writer: Box::new(stream), lines: rx, child: None, next_id: 1, timeout })
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| TransportError::Connect(format!("{}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                spawn_reader(stdout, tx);
                Ok(Self { writer: Box::new(stdin), lines: rx, child: Some(child), next_id: 1, timeout })
            }
        }
    }

    fn call(&mut self, method: &str, mut fields: Value) -> Result<Value, TransportError> {
        let id = self.next_id;
        self.next_id += 1;
        fields["id"] = json!(id);
        fields["method"] = json!(method);
        let mut line = serde_json::to_string(&fields).map_err(|e| TransportError::Io(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(|e| TransportError::Io(e.to_string()))?;
        self.writer.flush().map_err(|e| TransportError::Io(e.to_string()))?;

        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(TransportError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
        };
        parse_response(&reply)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin asks the peer to shut down.
            self.writer = Box::new(std::io::sink());
            for _ in 0..20 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            child.kill().ok();
            child.wait().ok();
        }
    }
}

fn spawn_reader<R: std::io::Read + Send + 'static>(reader: R, tx: mpsc::Sender<std::io::Result<String>>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    tx.send(Err(e)).ok();
                    break;
                }
            }
        }
    });
}

/// Decodes one response frame into its `data` payload.
pub fn parse_response(line: &str) -> Result<Value, TransportError> {
    let v: Value = serde_json::from_str(line.trim()).map_err(|e| TransportError::MalformedFrame(format!("{e}: {line:.80}")))?;
    match v.get("ok").and_then(Value::as_bool) {
        Some(true) => v.get("data").cloned().ok_or_else(|| TransportError::MalformedFrame("ok frame without data".into())),
        Some(false) => Err(TransportError::Remote {
            code: v.get("code").and_then(Value::as_str).unwrap_or("unknown").to_string(),
            message: v.get("message").and_then(Value::as_str).unwrap_or("").to_string(),
        }),
        None => Err(TransportError::MalformedFrame("missing boolean `ok`".into())),
    }
}

pub fn encode_tensor(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_tensor(payload: &Value) -> Result<Vec<f64>, TransportError> {
    let s = payload.as_str().ok_or_else(|| TransportError::MalformedFrame("tensor payload is not a base64 string".into()))?;
    let bytes = STANDARD.decode(s).map_err(|e| TransportError::MalformedFrame(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(TransportError::MalformedFrame(format!("tensor byte length {} not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// A classifier and/or embedder served by a bridge peer.
pub struct BridgeModel {
    endpoint: Endpoint,
    info: PeerInfo,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for BridgeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeModel").field("endpoint", &self.endpoint).field("info", &self.info).finish()
    }
}

/// Connects and performs the `info` handshake.
pub fn connect_external_model(endpoint: &Endpoint) -> Result<BridgeModel> {
    connect_with_timeout(endpoint, DEFAULT_TIMEOUT)
}

pub fn connect_with_timeout(endpoint: &Endpoint, timeout: Duration) -> Result<BridgeModel> {
    let mut conn = Connection::open(endpoint, timeout)?;
    let data = conn.call("info", json!({}))?;
    let version = data
        .get("protocol_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| TransportError::Handshake("info lacks protocol_version".into()))?;
    if version != PROTOCOL_VERSION as u64 {
        return Err(TransportError::VersionMismatch { got: version }.into());
    }
    let info: PeerInfo = serde_json::from_value(data).map_err(|e| TransportError::Handshake(format!("bad info payload: {e}")))?;
    if info.input.c != crate::image::CHANNELS || info.input.h == 0 || info.input.w == 0 {
        return Err(TransportError::Handshake(format!("unsupported input geometry {}", info.input)).into());
    }
    if !info.has_embeddings && info.classes.is_empty() {
        return Err(TransportError::Handshake("peer declares neither classes nor embeddings".into()).into());
    }
    Ok(BridgeModel { endpoint: endpoint.clone(), info, conn: Mutex::new(conn) })
}

impl BridgeModel {
    pub fn info(&self) -> &PeerInfo {
        &self.info
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn call(&self, method: &str, fields: Value) -> Result<Value> {
        let mut conn = self.conn.lock().expect("bridge connection poisoned");
        Ok(conn.call(method, fields)?)
    }

    /// Sends an arbitrary method; used by conformance checks.
    pub fn raw_call(&self, method: &str, fields: Value) -> Result<Value> {
        self.call(method, fields)
    }

    pub fn gradient(&self, image: &Image, label: usize, direction: Direction) -> Result<Vec<f64>> {
        if !self.info.has_input_gradient {
            return Err(Error::Unsupported(format!("peer {} has no input gradient", self.endpoint)));
        }
        let data = self.call(
            "grad_input",
            json!({"image": encode_tensor(image.data()), "label": label, "direction": direction.as_str()}),
        )?;
        let g = decode_tensor(&data)?;
        if g.len() != image.data().len() {
            return Err(TransportError::MalformedFrame(format!("gradient has {} values, image has {}", g.len(), image.data().len())).into());
        }
        Ok(g)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if !self.info.has_embeddings {
            return Err(Error::Unsupported(format!("peer {} has no embeddings", self.endpoint)));
        }
        Ok(decode_tensor(&self.call("embed_text", json!({"text": text}))?)?)
    }
}

impl Classifier for BridgeModel {
    fn num_classes(&self) -> usize {
        self.info.classes.len()
    }

    fn input_shape(&self) -> InputShape {
        self.info.input
    }

    fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        if self.info.classes.is_empty() {
            return Err(Error::Unsupported(format!("peer {} is not a classifier", self.endpoint)));
        }
        Ok(decode_tensor(&self.call("logits", json!({"image": encode_tensor(image.data())}))?)?)
    }

    fn has_input_gradient(&self) -> bool {
        self.info.has_input_gradient
    }

    fn loss_gradient(&self, image: &Image, label: usize) -> Result<Vec<f64>> {
        self.gradient(image, label, Direction::Maximize)
    }

    fn snapshot_id(&self) -> String {
        format!("bridge:{}", self.endpoint)
    }
}

impl ImageEmbedder for BridgeModel {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if !self.info.has_embeddings {
            return Err(Error::Unsupported(format!("peer {} has no embeddings", self.endpoint)));
        }
        Ok(decode_tensor(&self.call("embed_image", json!({"image": encode_tensor(image.data())}))?)?)
    }

    fn embedder_id(&self) -> String {
        format!("bridge:{}", self.endpoint)
    }
}
