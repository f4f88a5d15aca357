use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{check_responses, Scorer, ScorerRequest, ScorerResponse};
use crate::digest::sha256_hex;
use crate::error::{Error, Result, ScorerError};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    #[serde(with = "super::protocol::nullable_f64::vec")]
    log_probs: Vec<f64>,
}

/// Replay cache in front of another scorer.
///
/// Responses are keyed by request content (pieces, mask positions and
/// targets, not the id) and appended to a line-delimited file, so a re-run
/// against the same file sees exactly the recorded log-probabilities.
pub struct CachedScorer<S> {
    inner: S,
    path: PathBuf,
    entries: Mutex<HashMap<String, Vec<f64>>>,
}

fn request_key(q: &ScorerRequest) -> String {
    let positions: Vec<String> = q.mask_positions.iter().map(usize::to_string).collect();
    sha256_hex(&[&q.pieces.join("\u{1}"), &positions.join(","), &q.targets.join("\u{1}")])
}

impl<S: Scorer> CachedScorer<S> {
    pub fn open(inner: S, path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: Entry = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(path.display().to_string(), n + 1, e.to_string()))?;
                entries.insert(e.key, e.log_probs);
            }
        }
        Ok(CachedScorer {
            inner,
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        let keys: Vec<String> = requests.iter().map(request_key).collect();
        let misses: Vec<usize> = {
            let entries = self.entries.lock().unwrap();
            (0..requests.len())
                .filter(|&i| !entries.contains_key(&keys[i]))
                .collect()
        };
        if !misses.is_empty() {
            let batch: Vec<ScorerRequest> = misses.iter().map(|&i| requests[i].clone()).collect();
            let fresh = self.inner.score(&batch)?;
            check_responses(&batch, &fresh)?;
            let mut entries = self.entries.lock().unwrap();
            let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
            let mut buf = String::new();
            for (&i, r) in misses.iter().zip(fresh) {
                if entries.contains_key(&keys[i]) {
                    continue;
                }
                let entry = Entry {
                    key: keys[i].clone(),
                    log_probs: r.log_probs,
                };
                buf.push_str(&serde_json::to_string(&entry).expect("cache entries serialize"));
                buf.push('\n');
                entries.insert(entry.key, entry.log_probs);
            }
            file.write_all(buf.as_bytes())?;
        }
        let entries = self.entries.lock().unwrap();
        Ok(requests
            .iter()
            .zip(&keys)
            .map(|(q, k)| ScorerResponse {
                id: q.id.clone(),
                log_probs: entries[k].clone(),
            })
            .collect())
    }
}
