//! Corpus ingestion: sentence segmentation, word tokenization and
//! part-of-speech tagging.
//!
//! Two input layouts are supported. A *plain* corpus holds one document per
//! line; each line is segmented into sentences, tokenized, and tagged with the
//! [`BaselineTagger`]. A *pretagged* corpus carries `surface/TAG` fields, a
//! blank line ends a sentence, and a `# doc <id>` line starts a new document.
//! Tags from a pretagged file are trusted as-is.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penn Treebank noun tags.
pub const NOUN_TAGS: [&str; 4] = ["NN", "NNS", "NNP", "NNPS"];

const BUNDLED_ABBREVIATIONS: &str = include_str!("../data/abbreviations.txt");
const BUNDLED_TAGGER: &str = include_str!("../data/tagger.lex");

/// A segmented, word-tokenized, tagged sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub doc_id: String,
    pub sent_idx: usize,
    pub words: Vec<String>,
    pub pos_tags: Vec<String>,
    pub raw_text: String,
}

impl SentenceRecord {
    pub fn new(
        doc_id: impl Into<String>,
        sent_idx: usize,
        words: Vec<String>,
        pos_tags: Vec<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self> {
        if words.is_empty() || words.len() != pos_tags.len() {
            return Err(Error::invalid(format!(
                "sentence has {} words and {} tags",
                words.len(),
                pos_tags.len()
            )));
        }
        Ok(SentenceRecord {
            doc_id: doc_id.into(),
            sent_idx,
            words,
            pos_tags,
            raw_text: raw_text.into(),
        })
    }

    /// The sentence text rebuilt from `words` with [`detokenize`].
    pub fn text(&self) -> String {
        detokenize(&self.words)
    }
}

/// Indices of noun-tagged words, ascending.
pub fn noun_positions(record: &SentenceRecord) -> Vec<usize> {
    record
        .pos_tags
        .iter()
        .enumerate()
        .filter(|(_, t)| is_noun_tag(t))
        .map(|(i, _)| i)
        .collect()
}

pub fn is_noun_tag(tag: &str) -> bool {
    NOUN_TAGS.contains(&tag)
}

fn attaches_left(token: &str) -> bool {
    const CLOSERS: [&str; 12] = [".", ",", "!", "?", ";", ":", ")", "]", "}", "%", "''", "n't"];
    if CLOSERS.contains(&token) {
        return true;
    }
    let mut chars = token.chars();
    matches!(
        (chars.next(), chars.next()),
        (Some('\''), Some(c)) if c.is_alphabetic()
    )
}

fn attaches_right(token: &str) -> bool {
    matches!(token, "(" | "[" | "{" | "``" | "$")
}

/// Joins word tokens into text: single spaces, except that closing
/// punctuation and clitics (`'s`, `n't`, ...) attach to the previous token
/// and opening brackets attach to the next.
pub fn detokenize<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for w in words {
        let w = w.as_ref();
        if !glue_next && !attaches_left(w) {
            out.push(' ');
        }
        out.push_str(w);
        glue_next = attaches_right(w);
    }
    out
}

/// Rule-based sentence splitter with an abbreviation stop-list.
///
/// A sentence ends at `.`, `!` or `?` (plus any trailing closing quotes or
/// brackets) when followed by whitespace and then an uppercase letter, a
/// digit, or an opening quote/bracket. A period does not end a sentence when
/// the word it closes is on the stop-list or is a single-letter initial.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::from_list(BUNDLED_ABBREVIATIONS)
    }
}

impl Segmenter {
    /// Builds a segmenter from newline-separated abbreviations.
    pub fn from_list(list: &str) -> Self {
        let abbreviations = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_lowercase)
            .collect();
        Segmenter { abbreviations }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Segmenter::from_list(&text))
    }

    pub fn is_abbreviation(&self, word: &str) -> bool {
        self.abbreviations.contains(&word.to_lowercase())
    }

    pub fn segment(&self, text: &str) -> Vec<String> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut sentences = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if !matches!(c, '.' | '!' | '?') {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | ')' | ']') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = k > j
                && k < chars.len()
                && {
                    let next = chars[k].1;
                    next.is_uppercase() || next.is_ascii_digit() || matches!(next, '"' | '\'' | '(' | '[' | '`')
                }
                && !(c == '.' && j == i + 1 && self.ends_in_abbreviation(text, start, pos));
            if boundary {
                let end = if j < chars.len() { chars[j].0 } else { text.len() };
                push_trimmed(&mut sentences, &text[start..end]);
                start = chars[k].0;
                i = k;
            } else {
                i = j;
            }
        }
        push_trimmed(&mut sentences, &text[start..]);
        sentences
    }

    /// Whether the word ending with the period at byte `dot` is an abbreviation.
    fn ends_in_abbreviation(&self, text: &str, start: usize, dot: usize) -> bool {
        let word_start = text[start..dot]
            .rfind(char::is_whitespace)
            .map(|p| start + p + 1)
            .unwrap_or(start);
        let word = text[word_start..=dot].trim_start_matches(['(', '"', '\'', '[']);
        if self.is_abbreviation(word) {
            return true;
        }
        let mut cs = word.chars();
        matches!((cs.next(), cs.next(), cs.next()), (Some(a), Some('.'), None) if a.is_uppercase())
    }
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Splits a document into sentences with the bundled abbreviation list.
pub fn segment_sentences(text: &str) -> Vec<String> {
    Segmenter::default().segment(text)
}

const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];

/// Splits one sentence into word tokens, peeling punctuation and clitics
/// off whitespace-separated chunks. Abbreviations and dotted initialisms
/// (`U.S.`) keep their periods.
pub fn word_tokenize(sentence: &str, segmenter: &Segmenter) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut body = chunk;
        while let Some(c) = body.chars().next() {
            if body.len() > c.len_utf8() && matches!(c, '"' | '\'' | '`' | '(' | '[' | '{') {
                out.push(c.to_string());
                body = &body[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = body.chars().next_back() {
            if !matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | ')' | ']' | '}' | '"' | '\'') {
                break;
            }
            if c == '.' && (segmenter.is_abbreviation(body) || is_initialism(body)) {
                break;
            }
            if c == '\'' && body.len() == 1 {
                break;
            }
            trailing.push(c.to_string());
            body = &body[..body.len() - c.len_utf8()];
            if body.is_empty() {
                break;
            }
        }
        if !body.is_empty() {
            let lower = body.to_lowercase();
            if lower.ends_with("n't") && body.len() > 3 {
                let cut = body.len() - 3;
                out.push(body[..cut].to_string());
                out.push(body[cut..].to_string());
            } else if let Some(cl) = CLITICS.iter().find(|cl| lower.ends_with(*cl) && body.len() > cl.len()) {
                let cut = body.len() - cl.len();
                out.push(body[..cut].to_string());
                out.push(body[cut..].to_string());
            } else {
                out.push(body.to_string());
            }
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn is_initialism(word: &str) -> bool {
    word.len() >= 4
        && word.ends_with('.')
        && word[..word.len() - 1].contains('.')
        && word.chars().all(|c| c == '.' || c.is_alphabetic())
}

/// Closed-class lexicon plus suffix and capitalization heuristics.
#[derive(Debug, Clone)]
pub struct BaselineTagger {
    lexicon: HashMap<String, String>,
    /// Sorted longest ending first.
    suffixes: Vec<(String, String)>,
}

impl BaselineTagger {
    /// The model compiled into the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TAGGER, "<bundled>").expect("bundled tagger model is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses the model format: `lex<TAB>surface<TAB>TAG` and
    /// `suffix<TAB>ending<TAB>TAG` lines, `#` comments.
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lexicon = HashMap::new();
        let mut suffixes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["lex", word, tag] if !word.is_empty() && !tag.is_empty() => {
                    lexicon.entry(word.to_string()).or_insert_with(|| tag.to_string());
                }
                ["suffix", end, tag] if !end.is_empty() && !tag.is_empty() => {
                    suffixes.push((end.to_string(), tag.to_string()));
                }
                _ => return Err(Error::parse(name, n + 1, "expected lex|suffix, surface, tag")),
            }
        }
        suffixes.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(BaselineTagger { lexicon, suffixes })
    }

    /// One Penn Treebank tag per word.
    pub fn tag(&self, words: &[String]) -> Result<Vec<String>> {
        if words.is_empty() {
            return Err(Error::invalid("cannot tag an empty word list"));
        }
        Ok(words.iter().enumerate().map(|(i, w)| self.tag_word(w, i)).collect())
    }

    fn tag_word(&self, word: &str, position: usize) -> String {
        if let Some(t) = self.lexicon.get(word) {
            return t.clone();
        }
        if is_number(word) {
            return "CD".into();
        }
        let lower = word.to_lowercase();
        let capitalized = word.chars().next().is_some_and(char::is_uppercase);
        if capitalized {
            if position == 0 {
                if let Some(t) = self.lexicon.get(&lower) {
                    return t.clone();
                }
            }
            return "NNP".into();
        }
        if let Some(t) = self.lexicon.get(&lower) {
            return t.clone();
        }
        if word.contains('-') && word.len() > 1 {
            return "JJ".into();
        }
        self.suffixes
            .iter()
            .find(|(end, _)| lower.len() > end.len() + 1 && lower.ends_with(end.as_str()))
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| "NN".into())
    }
}

fn is_number(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
        && word
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-' | '/'))
}

/// Tags a word list with the bundled model.
pub fn tag_pos(words: &[String]) -> Result<Vec<String>> {
    BaselineTagger::bundled().tag(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Plain,
    Pretagged,
}

/// Tools needed to turn plain text into records.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub segmenter: Segmenter,
    pub tagger: BaselineTagger,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            segmenter: Segmenter::default(),
            tagger: BaselineTagger::bundled(),
        }
    }
}

impl Pipeline {
    /// Segments, tokenizes and tags one plain-text document.
    pub fn process_document(&self, doc_id: &str, text: &str) -> Vec<SentenceRecord> {
        self.segmenter
            .segment(text)
            .into_iter()
            .filter_map(|raw| {
                let words = word_tokenize(&raw, &self.segmenter);
                let tags = self.tagger.tag(&words).ok()?;
                Some((words, tags, raw))
            })
            .enumerate()
            .map(|(i, (words, pos_tags, raw_text))| SentenceRecord {
                doc_id: doc_id.to_string(),
                sent_idx: i,
                words,
                pos_tags,
                raw_text,
            })
            .collect()
    }
}

/// Streams records from a corpus file. Malformed pretagged blocks surface
/// as `Err` items carrying the line number; iteration continues past them.
pub fn load_corpus<'p>(
    path: &Path,
    format: CorpusFormat,
    pipeline: &'p Pipeline,
) -> Result<Box<dyn Iterator<Item = Result<SentenceRecord>> + 'p>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let reader = BufReader::new(file);
    Ok(match format {
        CorpusFormat::Plain => Box::new(PlainReader::new(reader, name, pipeline)),
        CorpusFormat::Pretagged => Box::new(PretaggedReader::new(reader, name)),
    })
}

const PLAIN_CHUNK: usize = 512;

/// Plain documents are processed in parallel chunks and emitted in file
/// order.
pub struct PlainReader<'p, R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    name: String,
    pipeline: &'p Pipeline,
    pending: VecDeque<Result<SentenceRecord>>,
    done: bool,
}

impl<'p, R: BufRead> PlainReader<'p, R> {
    pub fn new(reader: R, name: String, pipeline: &'p Pipeline) -> Self {
        PlainReader {
            lines: reader.lines(),
            line_no: 0,
            name,
            pipeline,
            pending: VecDeque::new(),
            done: false,
        }
    }

    fn fill(&mut self) {
        let mut docs = Vec::with_capacity(PLAIN_CHUNK);
        while docs.len() < PLAIN_CHUNK {
            match self.lines.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    self.line_no += 1;
                    self.pending
                        .push_back(Err(Error::parse(&self.name, self.line_no, e.to_string())));
                    self.done = true;
                    break;
                }
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if !line.trim().is_empty() {
                        docs.push((self.line_no, line));
                    }
                }
            }
        }
        let pipeline = self.pipeline;
        let records: Vec<Vec<SentenceRecord>> = docs
            .par_iter()
            .map(|(n, text)| pipeline.process_document(&n.to_string(), text))
            .collect();
        // An I/O error pushed above belongs after the documents read before it.
        let tail: Vec<_> = self.pending.drain(..).collect();
        self.pending.extend(records.into_iter().flatten().map(Ok));
        self.pending.extend(tail);
    }
}

impl<R: BufRead> Iterator for PlainReader<'_, R> {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.pending.is_empty() && !self.done {
            self.fill();
        }
        self.pending.pop_front()
    }
}

pub struct PretaggedReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    name: String,
    doc_id: String,
    sent_idx: usize,
    done: bool,
}

impl<R: BufRead> PretaggedReader<R> {
    pub fn new(reader: R, name: String) -> Self {
        PretaggedReader {
            lines: reader.lines(),
            line_no: 0,
            name,
            doc_id: "0".into(),
            sent_idx: 0,
            done: false,
        }
    }

    fn finish_block(&mut self, start_line: usize, fields: Vec<String>) -> Result<SentenceRecord> {
        let sent_idx = self.sent_idx;
        self.sent_idx += 1;
        let mut words = Vec::with_capacity(fields.len());
        let mut tags = Vec::with_capacity(fields.len());
        for field in fields {
            match field.rsplit_once('/') {
                Some((w, t)) if !w.is_empty() && !t.is_empty() => {
                    words.push(w.to_string());
                    tags.push(t.to_string());
                }
                _ => {
                    return Err(Error::parse(
                        &self.name,
                        start_line,
                        format!("field {field:?} is not surface/TAG"),
                    ))
                }
            }
        }
        let raw = detokenize(&words);
        SentenceRecord::new(self.doc_id.clone(), sent_idx, words, tags, raw)
            .map_err(|e| Error::parse(&self.name, start_line, e.to_string()))
    }
}

impl<R: BufRead> Iterator for PretaggedReader<R> {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut fields: Vec<String> = Vec::new();
        let mut start_line = 0;
        loop {
            let line = match self.lines.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(Error::parse(&self.name, self.line_no + 1, e.to_string())));
                }
                Some(Ok(l)) => l,
            };
            self.line_no += 1;
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix("# doc") {
                if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
                    // Not a document header; fall through as data.
                } else {
                    if !fields.is_empty() {
                        // Header without a preceding blank line closes the sentence.
                        let record = self.finish_block(start_line, fields);
                        self.doc_id = rest.trim().to_string();
                        self.sent_idx = 0;
                        return Some(record);
                    }
                    self.doc_id = rest.trim().to_string();
                    self.sent_idx = 0;
                    continue;
                }
            }
            if trimmed.is_empty() {
                if fields.is_empty() {
                    continue;
                }
                break;
            }
            if fields.is_empty() {
                start_line = self.line_no;
            }
            fields.extend(trimmed.split_whitespace().map(str::to_string));
        }
        if fields.is_empty() {
            return None;
        }
        Some(self.finish_block(start_line, fields))
    }
}
