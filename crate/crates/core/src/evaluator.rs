//! Benchmark evaluation: WSC-style accuracy with associative / switched
//! subsets and consistency, and WNLI accuracy through a premise-hypothesis
//! to masked-example transformation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, is_noun_tag, word_tokenize, Pipeline};
use crate::error::{Error, Result};
use crate::generator::{normalize, MaskedExample};
use crate::scoring::{predict_from_scores, CandidateScorer, Scorer};
use crate::wordpiece::MASK;

/// Subset flags for one WSC example. The switched variant reuses the
/// original candidate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WscAnnotation {
    pub example_id: String,
    pub associative: bool,
    pub switchable: bool,
    #[serde(default)]
    pub switched_text: Option<String>,
    #[serde(default)]
    pub switched_answer_idx: Option<usize>,
}

impl WscAnnotation {
    pub fn validate(&self) -> Result<()> {
        let has_text = self.switched_text.is_some();
        let has_idx = self.switched_answer_idx.is_some();
        if self.switchable != has_text || has_text != has_idx {
            return Err(Error::invalid(format!(
                "annotation {}: switched_text and switched_answer_idx must be present iff switchable",
                self.example_id
            )));
        }
        Ok(())
    }

    /// The switched variant of `example`, if any.
    pub fn switched(&self, example: &MaskedExample) -> Option<MaskedExample> {
        Some(MaskedExample {
            id: format!("{}#switched", example.id),
            masked_text: self.switched_text.clone()?,
            candidates: example.candidates.clone(),
            answer_idx: self.switched_answer_idx?,
            pair_id: example.pair_id.clone(),
            source: example.source.clone(),
        })
    }
}

/// Reads line-delimited annotation records keyed by `example_id`.
pub fn read_annotations(path: &Path) -> Result<HashMap<String, WscAnnotation>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = HashMap::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: WscAnnotation = serde_json::from_str(&line).map_err(|e| Error::parse(&name, n + 1, e.to_string()))?;
        a.validate().map_err(|e| Error::parse(&name, n + 1, e.to_string()))?;
        if out.contains_key(&a.example_id) {
            return Err(Error::parse(
                &name,
                n + 1,
                format!("duplicate annotation {}", a.example_id),
            ));
        }
        out.insert(a.example_id.clone(), a);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Subset {
    pub fn new(correct: usize, total: usize) -> Self {
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Subset {
            correct,
            total,
            accuracy,
        }
    }

    /// Accuracy, or `None` for an empty subset.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then_some(self.accuracy)
    }
}

/// What counts as a consistent answer change between the unswitched and
/// switched variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyMode {
    /// The predicted party changes.
    #[default]
    Flip,
    /// The predicted party changes and both predictions are correct.
    FlipAndCorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WscMetrics {
    pub overall: Subset,
    pub non_associative: Subset,
    pub associative: Subset,
    pub unswitched: Subset,
    pub switched: Subset,
    pub consistency: f64,
    pub consistency_mode: ConsistencyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WnliMetrics {
    pub score: Subset,
    /// Row index and reason for rows that could not be aligned.
    pub skipped: Vec<(String, String)>,
    pub skipped_count_as_incorrect: bool,
    /// Rows whose premise had no alternative noun; predicted label 1.
    pub single_candidate: Vec<String>,
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wsc: Option<WscMetrics>,
    pub wnli: Option<WnliMetrics>,
}

/// Fraction of aligned pairs whose predicted party differs between the two
/// lists. Parties are compared after [`normalize`].
pub fn consistency<S: AsRef<str>>(preds_unswitched: &[S], preds_switched: &[S]) -> Result<f64> {
    if preds_unswitched.len() != preds_switched.len() {
        return Err(Error::invalid(format!(
            "consistency needs aligned lists, got {} and {}",
            preds_unswitched.len(),
            preds_switched.len()
        )));
    }
    if preds_unswitched.is_empty() {
        return Ok(0.0);
    }
    let flips = preds_unswitched
        .iter()
        .zip(preds_switched)
        .filter(|(a, b)| normalize(a.as_ref()) != normalize(b.as_ref()))
        .count();
    Ok(flips as f64 / preds_unswitched.len() as f64)
}

/// One scored WSC example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WscPrediction {
    pub example_id: String,
    pub predicted: usize,
    pub correct: bool,
    pub switched_predicted: Option<usize>,
    pub switched_correct: Option<bool>,
}

/// Scores every example (and its switched variant) and aggregates the
/// subset metrics. Fails on the first example without an annotation.
pub fn evaluate_wsc<S: Scorer + ?Sized>(
    scorer: &CandidateScorer<'_, S>,
    examples: &[MaskedExample],
    annotations: &HashMap<String, WscAnnotation>,
    seed: u64,
    mode: ConsistencyMode,
) -> Result<(WscMetrics, Vec<WscPrediction>)> {
    let mut batch = Vec::with_capacity(examples.len() * 2);
    let mut switched_slot = Vec::with_capacity(examples.len());
    for e in examples {
        let a = annotations
            .get(&e.id)
            .ok_or_else(|| Error::invalid(format!("example {} has no annotation", e.id)))?;
        a.validate()?;
        batch.push(e.clone());
        switched_slot.push(a.switched(e).map(|s| {
            batch.push(s);
            batch.len() - 1
        }));
    }
    let scores = scorer.score_examples(&batch)?;
    let predict = |i: usize| predict_from_scores(&batch[i], &scores[i], seed);

    let mut predictions = Vec::with_capacity(examples.len());
    let mut cursor = 0;
    for (e, slot) in examples.iter().zip(&switched_slot) {
        let predicted = predict(cursor);
        cursor += 1 + slot.is_some() as usize;
        let (switched_predicted, switched_correct) = match slot {
            Some(i) => {
                let p = predict(*i);
                (Some(p), Some(p == batch[*i].answer_idx))
            }
            None => (None, None),
        };
        predictions.push(WscPrediction {
            example_id: e.id.clone(),
            predicted,
            correct: predicted == e.answer_idx,
            switched_predicted,
            switched_correct,
        });
    }
    let metrics = aggregate_wsc(examples, annotations, &predictions, mode);
    Ok((metrics, predictions))
}

fn aggregate_wsc(
    examples: &[MaskedExample],
    annotations: &HashMap<String, WscAnnotation>,
    predictions: &[WscPrediction],
    mode: ConsistencyMode,
) -> WscMetrics {
    let (mut all, mut assoc, mut non_assoc, mut unsw, mut sw) = ([0usize; 2], [0; 2], [0; 2], [0; 2], [0; 2]);
    let mut flips = 0usize;
    let bump = |c: &mut [usize; 2], ok: bool| {
        c[0] += ok as usize;
        c[1] += 1;
    };
    for (e, p) in examples.iter().zip(predictions) {
        let a = &annotations[&e.id];
        bump(&mut all, p.correct);
        bump(if a.associative { &mut assoc } else { &mut non_assoc }, p.correct);
        if let (Some(sp), Some(sc)) = (p.switched_predicted, p.switched_correct) {
            bump(&mut unsw, p.correct);
            bump(&mut sw, sc);
            let flipped = normalize(&e.candidates[p.predicted]) != normalize(&e.candidates[sp]);
            let counts = match mode {
                ConsistencyMode::Flip => flipped,
                ConsistencyMode::FlipAndCorrect => flipped && p.correct && sc,
            };
            flips += counts as usize;
        }
    }
    WscMetrics {
        overall: Subset::new(all[0], all[1]),
        non_associative: Subset::new(non_assoc[0], non_assoc[1]),
        associative: Subset::new(assoc[0], assoc[1]),
        unswitched: Subset::new(unsw[0], unsw[1]),
        switched: Subset::new(sw[0], sw[1]),
        consistency: if unsw[1] == 0 {
            0.0
        } else {
            flips as f64 / unsw[1] as f64
        },
        consistency_mode: mode,
    }
}

const PRONOUNS: [&str; 17] = [
    "it", "he", "she", "they", "him", "her", "them", "his", "its", "their", "hers", "theirs", "we", "us", "our", "i",
    "me",
];
const POSSESSIVES: [&str; 5] = ["his", "her", "its", "their", "our"];
const DETERMINERS: [&str; 3] = ["the", "a", "an"];

/// Why a premise-hypothesis pair could not be turned into an example.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AlignError {
    #[error("hypothesis is not the premise with one pronoun replaced")]
    NoAlignment,
    #[error("ambiguous alignment: {}", .0.join(" | "))]
    Ambiguous(Vec<String>),
}

/// A WNLI row in masked form.
#[derive(Debug, Clone, PartialEq)]
pub struct WnliConversion {
    /// Candidate 0 is the hypothesis candidate. May hold a single
    /// candidate when the premise has no other noun.
    pub example: MaskedExample,
    pub pronoun: String,
    /// Premise words of the aligned window with the pronoun masked.
    pub window: Vec<String>,
}

impl WnliConversion {
    /// The window with the answer filled in; equals the hypothesis under
    /// [`normalize_hypothesis`].
    pub fn filled_window(&self) -> String {
        detokenize(&self.window).replacen(MASK, self.example.answer(), 1)
    }
}

/// Lowercased, whitespace-collapsed, with one trailing sentence terminator
/// removed.
pub fn normalize_hypothesis(s: &str) -> String {
    let n = normalize(s);
    n.strip_suffix(['.', '!', '?'])
        .map(str::trim_end)
        .unwrap_or(&n)
        .to_string()
}

struct Alignment {
    pronoun_at: usize,
    start: usize,
    end: usize,
    /// Hypothesis tokens standing for the pronoun.
    candidate: Vec<String>,
    /// Trailing clitic kept after the mask (`'s` for possessives).
    clitic: Option<String>,
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Locates the pronoun the hypothesis replaces and builds the masked
/// premise. Candidates are the hypothesis candidate followed by the other
/// premise nouns in sentence order.
pub fn wnli_to_masked(
    id: &str,
    premise: &str,
    hypothesis: &str,
    pipeline: &Pipeline,
) -> std::result::Result<WnliConversion, AlignError> {
    let prem = word_tokenize(premise, &pipeline.segmenter);
    let mut hyp = word_tokenize(hypothesis, &pipeline.segmenter);
    if matches!(hyp.last().map(String::as_str), Some("." | "!" | "?")) {
        hyp.pop();
    }
    let lp: Vec<String> = prem.iter().map(|w| w.to_lowercase()).collect();
    let lh: Vec<String> = hyp.iter().map(|w| w.to_lowercase()).collect();

    let mut best: Vec<Alignment> = Vec::new();
    let mut best_overlap = 0usize;
    for j in (0..lp.len()).filter(|&j| PRONOUNS.contains(&lp[j].as_str())) {
        for p in 0..=j.min(lh.len()) {
            if lh[..p] != lp[j - p..j] {
                continue;
            }
            for q in 0..=(lh.len() - p).saturating_sub(1).min(lp.len() - j - 1) {
                if lh[lh.len() - q..] != lp[j + 1..j + 1 + q] {
                    continue;
                }
                let mut cand = lh[p..lh.len() - q].to_vec();
                let mut clitic = None;
                if POSSESSIVES.contains(&lp[j].as_str())
                    && cand.len() > 1
                    && cand.last().is_some_and(|c| c == "'s" || c == "'")
                {
                    clitic = Some(hyp[lh.len() - q - 1].clone());
                    cand.pop();
                }
                if cand.iter().any(|c| PRONOUNS.contains(&c.as_str())) {
                    continue;
                }
                let bare = if cand.len() > 1 && DETERMINERS.contains(&cand[0].as_str()) {
                    &cand[1..]
                } else {
                    &cand[..]
                };
                let mut rest = lp.clone();
                rest[j] = String::new();
                if !contains_seq(&rest, &cand) && !contains_seq(&rest, bare) {
                    continue;
                }
                let overlap = p + q;
                let align = Alignment {
                    pronoun_at: j,
                    start: j - p,
                    end: j + 1 + q,
                    candidate: hyp[p..p + cand.len()].to_vec(),
                    clitic,
                };
                if overlap > best_overlap || best.is_empty() {
                    best_overlap = overlap;
                    best = vec![align];
                } else if overlap == best_overlap
                    && !best.iter().any(|b| b.pronoun_at == j && b.candidate == align.candidate)
                {
                    best.push(align);
                }
            }
        }
    }
    let align = match best.len() {
        0 => return Err(AlignError::NoAlignment),
        1 => best.pop().unwrap(),
        _ => {
            return Err(AlignError::Ambiguous(
                best.iter()
                    .map(|a| format!("{} -> {}", prem[a.pronoun_at], detokenize(&a.candidate)))
                    .collect(),
            ))
        }
    };

    let answer = detokenize(&align.candidate);
    let replace = |words: &[String]| -> Vec<String> {
        let mut out = Vec::with_capacity(words.len() + 1);
        for (i, w) in words.iter().enumerate() {
            if i == align.pronoun_at {
                out.push(MASK.to_string());
                out.extend(align.clitic.clone());
            } else {
                out.push(w.clone());
            }
        }
        out
    };
    let masked_words = replace(&prem);
    let window = replace(&prem[..align.end])[align.start..].to_vec();

    let taken: HashSet<String> = align.candidate.iter().map(|w| w.to_lowercase()).collect();
    let mut candidates = vec![answer];
    let mut seen: HashSet<String> = HashSet::from([normalize(&candidates[0])]);
    if let Ok(tags) = pipeline.tagger.tag(&prem) {
        for (i, (w, t)) in prem.iter().zip(&tags).enumerate() {
            if i == align.pronoun_at || !is_noun_tag(t) || !w.chars().any(char::is_alphanumeric) {
                continue;
            }
            let n = normalize(w);
            if taken.contains(&n) || !seen.insert(n) {
                continue;
            }
            candidates.push(w.clone());
        }
    }
    Ok(WnliConversion {
        example: MaskedExample {
            id: id.to_string(),
            masked_text: detokenize(&masked_words),
            candidates,
            answer_idx: 0,
            pair_id: None,
            source: "wnli".into(),
        },
        pronoun: prem[align.pronoun_at].clone(),
        window,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WnliRow {
    pub index: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: u8,
}

/// Reads `index<TAB>sentence1<TAB>sentence2<TAB>label` rows after a header.
pub fn read_wnli_tsv<R: BufRead>(reader: R, name: &str) -> Result<Vec<WnliRow>> {
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(name, n + 1, e.to_string()))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [index, premise, hypothesis, label] = fields[..] else {
            return Err(Error::parse(
                name,
                n + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(name, n + 1, format!("label {other:?} is not 0 or 1"))),
        };
        rows.push(WnliRow {
            index: index.to_string(),
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            label,
        });
    }
    Ok(rows)
}

/// Accuracy of "hypothesis candidate wins" against the gold labels.
pub fn evaluate_wnli<S: Scorer + ?Sized>(
    scorer: &CandidateScorer<'_, S>,
    rows: &[WnliRow],
    pipeline: &Pipeline,
    seed: u64,
    skipped_count_as_incorrect: bool,
) -> Result<WnliMetrics> {
    let mut skipped = Vec::new();
    let mut single = Vec::new();
    let mut scored = Vec::new();
    let mut correct = 0usize;
    for row in rows {
        match wnli_to_masked(&row.index, &row.premise, &row.hypothesis, pipeline) {
            Err(e) => skipped.push((row.index.clone(), e.to_string())),
            Ok(c) if c.example.candidates.len() < 2 => {
                single.push(row.index.clone());
                correct += (row.label == 1) as usize;
            }
            Ok(c) => scored.push((row.label, c.example)),
        }
    }
    let examples: Vec<MaskedExample> = scored.iter().map(|(_, e)| e.clone()).collect();
    let scores = scorer.score_examples(&examples)?;
    for ((label, e), s) in scored.iter().zip(&scores) {
        let predicted_label = (predict_from_scores(e, s, seed) == 0) as u8;
        correct += (predicted_label == *label) as usize;
    }
    let total = if skipped_count_as_incorrect {
        rows.len()
    } else {
        rows.len() - skipped.len()
    };
    Ok(WnliMetrics {
        score: Subset::new(correct, total),
        skipped,
        skipped_count_as_incorrect,
        single_candidate: single,
    })
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "WSC273",
    "non-assoc.",
    "assoc.",
    "unswitched",
    "switched",
    "consist.",
    "WNLI",
];

/// One labelled line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub values: [Option<f64>; 7],
}

impl MetricsReport {
    pub fn row(&self, label: &str) -> ReportRow {
        let mut values = [None; 7];
        if let Some(w) = &self.wsc {
            values[0] = w.overall.value();
            values[1] = w.non_associative.value();
            values[2] = w.associative.value();
            values[3] = w.unswitched.value();
            values[4] = w.switched.value();
            values[5] = w.unswitched.value().map(|_| w.consistency);
        }
        if let Some(n) = &self.wnli {
            values[6] = n.score.value();
        }
        ReportRow {
            label: label.to_string(),
            values,
        }
    }
}

/// Fixed-column text table, values to three decimals, `--` for missing.
pub fn render_rows(rows: &[ReportRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("model".len());
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "model");
    for c in REPORT_COLUMNS {
        let _ = write!(out, "  {c:>10}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<label_w$}", r.label);
        for v in &r.values {
            let cell = v.map_or_else(|| "--".to_string(), |x| format!("{x:.3}"));
            let _ = write!(out, "  {cell:>10}");
        }
        out.push('\n');
    }
    out
}

pub fn render_report(report: &MetricsReport, label: &str) -> String {
    render_rows(&[report.row(label)])
}
