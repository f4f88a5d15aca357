use std::collections::HashMap;

use crate::corpus::SentenceRecord;
use crate::digest::sha256_hex;
use crate::error::{Error, Result, ScorerError};
use crate::wordpiece::Vocab;

use super::{Scorer, ScorerRequest, ScorerResponse};

/// Context-free unigram scorer with additive smoothing:
/// `log P(piece) = ln((count + s) / (total + s * |vocab|))`.
///
/// Targets outside the vocabulary get `-inf`.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    log_probs: HashMap<String, f64>,
    digest: String,
}

impl UnigramScorer {
    /// `counts[i]` is the count of the vocab piece with id `i`.
    pub fn from_counts(vocab: &Vocab, counts: &[u64], smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::invalid(format!("smoothing must be positive, got {smoothing}")));
        }
        if counts.len() != vocab.len() {
            return Err(Error::invalid(format!(
                "{} counts for a vocab of {}",
                counts.len(),
                vocab.len()
            )));
        }
        let total: u64 = counts.iter().sum();
        let log_probs = vocab
            .pieces()
            .iter()
            .zip(counts)
            .map(|(p, &c)| (p.clone(), smoothed_log_prob(c, total, smoothing, vocab.len())))
            .collect();
        let counts_text: Vec<String> = counts.iter().map(u64::to_string).collect();
        let digest = sha256_hex(&[
            "unigram",
            vocab.digest(),
            &smoothing.to_bits().to_string(),
            &counts_text.join(","),
        ]);
        Ok(UnigramScorer { log_probs, digest })
    }

    pub fn log_prob(&self, piece: &str) -> f64 {
        self.log_probs.get(piece).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

pub fn smoothed_log_prob(count: u64, total: u64, smoothing: f64, vocab_size: usize) -> f64 {
    ((count as f64 + smoothing) / (total as f64 + smoothing * vocab_size as f64)).ln()
}

/// Counts the word pieces of every record and builds a [`UnigramScorer`].
/// Words are split the same way candidates are, with [`Vocab::tokenize`].
pub fn fit_baseline_scorer<I>(corpus: I, vocab: &Vocab, smoothing: f64) -> Result<UnigramScorer>
where
    I: IntoIterator<Item = SentenceRecord>,
{
    let mut counts = vec![0u64; vocab.len()];
    let mut records = 0usize;
    for r in corpus {
        records += 1;
        for w in &r.words {
            for p in vocab.tokenize(w) {
                let id = vocab.id(&p).expect("tokenizer emits vocab pieces");
                counts[id] += 1;
            }
        }
    }
    if records == 0 {
        return Err(Error::invalid("cannot fit a baseline scorer on an empty corpus"));
    }
    UnigramScorer::from_counts(vocab, &counts, smoothing)
}

impl Scorer for UnigramScorer {
    fn digest(&self) -> String {
        self.digest.clone()
    }

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        requests
            .iter()
            .map(|q| {
                q.validate().map_err(|m| ScorerError::Rejected {
                    id: q.id.clone(),
                    message: m,
                })?;
                Ok(ScorerResponse {
                    id: q.id.clone(),
                    log_probs: q.targets.iter().map(|t| self.log_prob(t)).collect(),
                })
            })
            .collect()
    }
}
