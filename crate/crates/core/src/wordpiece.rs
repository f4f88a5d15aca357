//! Greedy longest-match-first WordPiece tokenization over a fixed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTINUATION_PREFIX: &str = "##";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [MASK, UNK, CLS, SEP];

/// Words longer than this many characters map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

/// Piece inventory; a piece's id is its line number in the vocab file.
#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
    digest: String,
}

impl Vocab {
    pub fn from_pieces<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let pieces: Vec<String> = pieces.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("vocab piece {i} is empty")));
            }
            if ids.insert(p.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocab piece {p:?} at id {i}")));
            }
        }
        for special in SPECIALS {
            if !ids.contains_key(special) {
                return Err(Error::invalid(format!("vocab is missing {special}")));
            }
        }
        let mut hasher = Sha256::new();
        for p in &pieces {
            hasher.update(p.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hex::encode(hasher.finalize());
        Ok(Vocab { pieces, ids, digest })
    }

    /// Loads a vocab file: one piece per line, surrounding whitespace ignored,
    /// blank lines skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pieces(text.lines().map(str::trim).filter(|l| !l.is_empty()))
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.ids.contains_key(piece)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Hex SHA-256 over every piece followed by `\n`, in id order. Both ends
    /// of the scorer protocol compare this during the handshake.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Splits one word into pieces. The word is lowercased first; the result
    /// is `["[UNK]"]` when no full decomposition exists.
    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        if SPECIALS.contains(&word) {
            return vec![word.to_string()];
        }
        let lower = word.to_lowercase();
        let chars: Vec<(usize, char)> = lower.char_indices().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK.to_string()];
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut candidate = String::with_capacity(lower.len() + 2);
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let begin = chars[start].0;
                let stop = chars.get(end).map_or(lower.len(), |c| c.0);
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION_PREFIX);
                }
                candidate.push_str(&lower[begin..stop]);
                if self.ids.contains_key(candidate.as_str()) {
                    found = Some(candidate.clone());
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => {
                    out.push(piece);
                    start = end;
                }
                None => return vec![UNK.to_string()],
            }
        }
        out
    }

    /// Pieces for every word of `text`, split with [`basic_split`].
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        basic_split(text).iter().flat_map(|w| self.tokenize_word(w)).collect()
    }
}

/// Splits text into words on whitespace and around punctuation characters,
/// keeping bracketed special tokens such as `[MASK]` intact.
pub fn basic_split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(*s)) {
                out.push(&rest[..special.len()]);
                rest = &rest[special.len()..];
                continue;
            }
            let c = rest.chars().next().unwrap();
            if is_punctuation(c) {
                out.push(&rest[..c.len_utf8()]);
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(i, ch)| is_punctuation(ch) || SPECIALS.iter().any(|s| rest[i..].starts_with(s)))
                .map_or(rest.len(), |(i, _)| i);
            out.push(&rest[..end]);
            rest = &rest[end..];
        }
    }
    out
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Denominator used by [`whole_word_fraction`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WholeWordBasis {
    /// Total piece count over all words.
    #[default]
    Pieces,
    /// Total word count.
    Words,
}

/// Share of the text represented by whole words: the number of words that
/// map to exactly one non-`[UNK]` piece, divided by the total piece count
/// (or word count, for [`WholeWordBasis::Words`]).
pub fn whole_word_fraction(vocab: &Vocab, text: &str, basis: WholeWordBasis) -> Result<f64> {
    let words = basic_split(text);
    let mut whole = 0usize;
    let mut pieces = 0usize;
    for w in &words {
        let p = vocab.tokenize_word(w);
        if p.len() == 1 && p[0] != UNK {
            whole += 1;
        }
        pieces += p.len();
    }
    let denom = match basis {
        WholeWordBasis::Pieces => pieces,
        WholeWordBasis::Words => words.len(),
    };
    if denom == 0 {
        return Err(Error::invalid("whole-word fraction of empty text"));
    }
    Ok(whole as f64 / denom as f64)
}
