//! Newline-delimited JSON scorer protocol.
//!
//! ```text
//! -> {"type":"hello","protocol":1,"vocab_digest":"<hex>"}
//! <- {"type":"hello","protocol":1,"vocab_digest":"<hex>"}
//! -> {"type":"score","id":"..","pieces":[..],"mask_positions":[..],"targets":[..]}
//! <- {"type":"result","id":"..","log_probs":[..]}
//! ```
//!
//! Log-probabilities are natural logs; `null` encodes negative infinity.
//! A server answers anything it cannot handle with
//! `{"type":"error","id":..,"message":..}` and keeps the stream open.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::error::ScorerError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScorerRequest {
    pub id: String,
    pub pieces: Vec<String>,
    pub mask_positions: Vec<usize>,
    pub targets: Vec<String>,
}

impl ScorerRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.mask_positions.len() != self.targets.len() {
            return Err(format!(
                "{} mask positions but {} targets",
                self.mask_positions.len(),
                self.targets.len()
            ));
        }
        if self.mask_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err("mask positions are not strictly ascending".into());
        }
        if let Some(&p) = self.mask_positions.iter().find(|&&p| p >= self.pieces.len()) {
            return Err(format!("mask position {p} outside {} pieces", self.pieces.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub id: String,
    #[serde(with = "nullable_f64::vec")]
    pub log_probs: Vec<f64>,
}

impl ScorerResponse {
    pub(crate) fn check_against(&self, request: &ScorerRequest) -> Result<(), ScorerError> {
        if self.log_probs.len() != request.mask_positions.len() {
            return Err(ScorerError::Protocol(format!(
                "response {} has {} log_probs for {} masks",
                self.id,
                self.log_probs.len(),
                request.mask_positions.len()
            )));
        }
        if self.log_probs.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(ScorerError::Protocol(format!(
                "response {} has a NaN or +inf log-probability",
                self.id
            )));
        }
        Ok(())
    }
}

/// Every record that travels over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello { protocol: u32, vocab_digest: String },
    Score(ScorerRequest),
    Result(ScorerResponse),
    Error { id: Option<String>, message: String },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("protocol messages serialize");
        s.push('\n');
        s
    }
}

/// Serde helpers mapping `-inf` to `null` and back.
pub mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    fn to_opt(x: f64) -> Option<f64> {
        (x != f64::NEG_INFINITY).then_some(x)
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        match to_opt(*x) {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for x in xs {
                seq.serialize_element(&super::to_opt(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::NEG_INFINITY))
                .collect())
        }
    }
}

fn error_line(id: Option<String>, message: impl Into<String>) -> String {
    Message::Error {
        id,
        message: message.into(),
    }
    .to_line()
}

/// Answers protocol traffic on one byte stream until EOF.
///
/// Scoring requests are refused until a hello with a matching protocol
/// version and vocab digest has been received.
pub fn serve<R: BufRead, W: Write>(
    scorer: &dyn Scorer,
    vocab_digest: &str,
    reader: R,
    mut writer: W,
) -> io::Result<()> {
    let mut ready = false;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Message>(&line) {
            Err(e) => error_line(None, format!("malformed message: {e}")),
            Ok(Message::Hello {
                protocol,
                vocab_digest: theirs,
            }) => {
                if protocol != PROTOCOL_VERSION {
                    error_line(None, format!("unsupported protocol {protocol}"))
                } else if theirs != vocab_digest {
                    error_line(None, format!("vocab digest mismatch: server has {vocab_digest}"))
                } else {
                    ready = true;
                    Message::Hello {
                        protocol: PROTOCOL_VERSION,
                        vocab_digest: vocab_digest.to_string(),
                    }
                    .to_line()
                }
            }
            Ok(Message::Score(req)) => {
                if !ready {
                    error_line(Some(req.id), "handshake required before scoring")
                } else if let Err(m) = req.validate() {
                    error_line(Some(req.id), m)
                } else {
                    match scorer.score(std::slice::from_ref(&req)) {
                        Ok(mut rs) if rs.len() == 1 => Message::Result(rs.remove(0)).to_line(),
                        Ok(_) => error_line(Some(req.id), "scorer returned no result"),
                        Err(e) => error_line(Some(req.id), e.to_string()),
                    }
                }
            }
            Ok(other) => error_line(None, format!("unexpected message {other:?}")),
        };
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener, scorer: Arc<dyn Scorer>, vocab_digest: String) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let scorer = Arc::clone(&scorer);
        let digest = vocab_digest.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(scorer.as_ref(), &digest, reader, stream);
        });
    }
    Ok(())
}
