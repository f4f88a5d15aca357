use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::protocol::{Message, PROTOCOL_VERSION};
use super::{Scorer, ScorerRequest, ScorerResponse};
use crate::digest::sha256_hex;
use crate::error::ScorerError;

/// Where a scorer server lives.
///
/// Parsed from `tcp://host:port` or `cmd:program arg1 arg2 ...` (the
/// command's stdin/stdout carry the protocol; arguments are split on
/// whitespace, no shell is involved).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Command { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err("empty tcp address".into());
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or("empty command")?;
            Ok(Endpoint::Command {
                program,
                args: parts.collect(),
            })
        } else {
            Err(format!(
                "unknown endpoint {s:?}: expected tcp://host:port or cmd:<program>"
            ))
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Command { program, args } => {
                write!(f, "cmd:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RemoteOptions {
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            timeout: Duration::from_secs(30),
            max_in_flight: 16,
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<std::io::Result<String>>,
    /// Set after a protocol failure; the stream may be out of step.
    broken: Option<String>,
}

/// Client side of the scorer protocol.
pub struct RemoteScorer {
    conn: Mutex<Connection>,
    child: Option<Mutex<Child>>,
    options: RemoteOptions,
    digest: String,
}

/// Connects to `endpoint` and performs the handshake.
pub fn remote_scorer(
    endpoint: &Endpoint,
    vocab_digest: &str,
    options: RemoteOptions,
) -> Result<RemoteScorer, ScorerError> {
    RemoteScorer::connect(endpoint, vocab_digest, options)
}

fn spawn_reader<R: std::io::Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl RemoteScorer {
    pub fn connect(endpoint: &Endpoint, vocab_digest: &str, options: RemoteOptions) -> Result<Self, ScorerError> {
        let (writer, incoming, child): (Box<dyn Write + Send>, _, _) = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                let read_half = stream.try_clone()?;
                (Box::new(stream), spawn_reader(read_half), None)
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (Box::new(stdin), spawn_reader(stdout), Some(Mutex::new(child)))
            }
        };
        let scorer = RemoteScorer {
            conn: Mutex::new(Connection {
                writer,
                incoming,
                broken: None,
            }),
            child,
            options,
            digest: sha256_hex(&["remote", &endpoint.to_string(), vocab_digest]),
        };
        scorer.handshake(vocab_digest)?;
        Ok(scorer)
    }

    fn handshake(&self, vocab_digest: &str) -> Result<(), ScorerError> {
        let mut conn = self.conn.lock().unwrap();
        let hello = Message::Hello {
            protocol: PROTOCOL_VERSION,
            vocab_digest: vocab_digest.to_string(),
        };
        conn.writer.write_all(hello.to_line().as_bytes())?;
        conn.writer.flush()?;
        match self.receive(&conn.incoming, Instant::now() + self.options.timeout)? {
            Message::Hello {
                protocol,
                vocab_digest: theirs,
            } => {
                if protocol != PROTOCOL_VERSION {
                    return Err(ScorerError::Handshake(format!(
                        "server speaks protocol {protocol}, client {PROTOCOL_VERSION}"
                    )));
                }
                if theirs != vocab_digest {
                    return Err(ScorerError::Handshake(format!(
                        "vocab digest mismatch: client {vocab_digest}, server {theirs}"
                    )));
                }
                Ok(())
            }
            Message::Error { message, .. } => Err(ScorerError::Handshake(message)),
            other => Err(ScorerError::Handshake(format!("unexpected reply {other:?}"))),
        }
    }

    fn receive(&self, incoming: &Receiver<std::io::Result<String>>, deadline: Instant) -> Result<Message, ScorerError> {
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let line = match incoming.recv_timeout(wait) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Err(ScorerError::Timeout(self.options.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ScorerError::Transport(std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "scorer closed the stream",
                    )))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(&line)
                .map_err(|e| ScorerError::Protocol(format!("malformed record {line:?}: {e}")));
        }
    }

    /// Sends one window of requests and collects their responses in request
    /// order, whatever order they arrive in.
    fn exchange(&self, conn: &mut Connection, window: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        let mut pending: HashMap<&str, usize> = HashMap::with_capacity(window.len());
        for (i, q) in window.iter().enumerate() {
            if pending.insert(q.id.as_str(), i).is_some() {
                return Err(ScorerError::Protocol(format!("duplicate request id {:?}", q.id)));
            }
        }
        for q in window {
            conn.writer.write_all(Message::Score(q.clone()).to_line().as_bytes())?;
        }
        conn.writer.flush()?;
        let mut out: Vec<Option<ScorerResponse>> = vec![None; window.len()];
        let deadline = Instant::now() + self.options.timeout;
        while !pending.is_empty() {
            match self.receive(&conn.incoming, deadline)? {
                Message::Result(r) => {
                    let i = pending
                        .remove(r.id.as_str())
                        .ok_or_else(|| ScorerError::Protocol(format!("response for unknown id {:?}", r.id)))?;
                    r.check_against(&window[i])?;
                    out[i] = Some(r);
                }
                Message::Error { id: Some(id), message } => return Err(ScorerError::Rejected { id, message }),
                Message::Error { id: None, message } => return Err(ScorerError::Protocol(message)),
                other => return Err(ScorerError::Protocol(format!("unexpected record {other:?}"))),
            }
        }
        Ok(out.into_iter().map(|r| r.expect("all ids answered")).collect())
    }
}

impl Scorer for RemoteScorer {
    fn digest(&self) -> String {
        self.digest.clone()
    }

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        let mut conn = self.conn.lock().unwrap();
        if let Some(reason) = &conn.broken {
            return Err(ScorerError::Protocol(format!("connection unusable: {reason}")));
        }
        let mut out = Vec::with_capacity(requests.len());
        for window in requests.chunks(self.options.max_in_flight.max(1)) {
            match self.exchange(&mut conn, window) {
                Ok(rs) => out.extend(rs),
                Err(e) => {
                    if !matches!(e, ScorerError::Rejected { .. }) {
                        conn.broken = Some(e.to_string());
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }
}

impl Drop for RemoteScorer {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap();
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
