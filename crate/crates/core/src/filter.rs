//! Difficulty filtering of mined examples and the manual quality audit.
//!
//! For a correct candidate `c1` and an incorrect `c2` the filter looks at
//! `v = log P(c2|s) - log P(c1|s)`. Examples far below zero are easy (the
//! model is confidently right); examples far above are usually noise (the
//! correct answer is a rare word). An example is kept when `v` falls inside
//! `[v_min, v_max]` and enough of the sentence is made of whole-word pieces.

use std::collections::HashSet;
use std::io::BufRead;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::seeded_rng;
use crate::error::{Error, Result, ScorerError};
use crate::generator::MaskedExample;
use crate::scoring::{CandidateScore, CandidateScorer, Scorer};
use crate::wordpiece::{whole_word_fraction, WholeWordBasis};

/// Which text the whole-word rule is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WholeWordScope {
    /// The sentence with the correct answer filled in.
    #[default]
    Sentence,
    /// The candidate strings only.
    Candidates,
}

/// How multi-candidate examples combine their pairwise checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PairRule {
    /// Every (correct, distractor) pair must pass.
    #[default]
    All,
    /// At least one pair must pass.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub min_whole_word_frac: f64,
    pub whole_word_basis: WholeWordBasis,
    pub whole_word_scope: WholeWordScope,
    pub pair_rule: PairRule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            v_min: -0.075,
            v_max: 0.30,
            min_whole_word_frac: 0.90,
            whole_word_basis: WholeWordBasis::Pieces,
            whole_word_scope: WholeWordScope::Sentence,
            pair_rule: PairRule::All,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v_min.is_nan() || self.v_max.is_nan() || self.v_min > self.v_max {
            return Err(Error::invalid(format!(
                "v_min {} must not exceed v_max {}",
                self.v_min, self.v_max
            )));
        }
        if !(0.0..=1.0).contains(&self.min_whole_word_frac) {
            return Err(Error::invalid(format!(
                "min_whole_word_frac {} not in [0, 1]",
                self.min_whole_word_frac
            )));
        }
        Ok(())
    }
}

/// Inclusive band check plus the whole-word threshold.
pub fn passes_filter(v: f64, whole_word_frac: f64, cfg: &FilterConfig) -> bool {
    cfg.v_min <= v && v <= cfg.v_max && whole_word_frac >= cfg.min_whole_word_frac
}

/// `log P(incorrect) - log P(correct)` for each distractor, in candidate
/// order.
pub fn v_scores(scores: &[CandidateScore], answer_idx: usize) -> Vec<f64> {
    let correct = scores[answer_idx].avg_log_prob;
    scores
        .iter()
        .filter(|s| s.candidate_idx != answer_idx)
        .map(|s| s.avg_log_prob - correct)
        .collect()
}

/// The pairwise score for an example with exactly two candidates.
pub fn v_score<S: Scorer + ?Sized>(scorer: &CandidateScorer<'_, S>, example: &MaskedExample) -> Result<f64> {
    if example.candidates.len() != 2 {
        return Err(Error::invalid(format!(
            "example {}: v-score needs exactly 2 candidates, found {}",
            example.id,
            example.candidates.len()
        )));
    }
    let scores = scorer.score_examples(std::slice::from_ref(example))?;
    Ok(v_scores(&scores[0], example.answer_idx)[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub rejected: usize,
    pub errored: usize,
    pub keep_rate: f64,
    pub scorer_digest: String,
    pub config: FilterConfig,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub kept: Vec<MaskedExample>,
    pub rejected: Vec<String>,
    /// Example id and error message.
    pub errored: Vec<(String, String)>,
    pub stats: FilterStats,
}

enum Verdict {
    Keep,
    Reject,
    Error(String),
}

const CHUNK: usize = 64;

/// Filters a dataset. Scoring runs in chunks on the current rayon pool;
/// output order follows input order. Examples the scorer rejects are
/// counted as errored; a lost connection or timeout fails the whole run.
pub fn filter_dataset<S: Scorer + ?Sized>(
    scorer: &CandidateScorer<'_, S>,
    examples: Vec<MaskedExample>,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    cfg.validate()?;
    let verdicts: Vec<Verdict> = examples
        .par_chunks(CHUNK)
        .map(|chunk| judge_chunk(scorer, chunk, cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let total = examples.len();
    let mut out = FilterOutput {
        kept: Vec::new(),
        rejected: Vec::new(),
        errored: Vec::new(),
        stats: FilterStats {
            total,
            kept: 0,
            rejected: 0,
            errored: 0,
            keep_rate: 0.0,
            scorer_digest: scorer.scorer.digest(),
            config: *cfg,
        },
    };
    for (ex, verdict) in examples.into_iter().zip(verdicts) {
        match verdict {
            Verdict::Keep => out.kept.push(ex),
            Verdict::Reject => out.rejected.push(ex.id),
            Verdict::Error(m) => out.errored.push((ex.id, m)),
        }
    }
    out.stats.kept = out.kept.len();
    out.stats.rejected = out.rejected.len();
    out.stats.errored = out.errored.len();
    if total > 0 {
        out.stats.keep_rate = out.stats.kept as f64 / total as f64;
    }
    Ok(out)
}

fn judge_chunk<S: Scorer + ?Sized>(
    scorer: &CandidateScorer<'_, S>,
    chunk: &[MaskedExample],
    cfg: &FilterConfig,
) -> Result<Vec<Verdict>> {
    match scorer.score_examples(chunk) {
        Ok(all) => Ok(chunk.iter().zip(&all).map(|(e, s)| judge(scorer, e, s, cfg)).collect()),
        Err(err) if is_fatal(&err) => Err(err),
        // isolate the failing examples
        Err(_) => chunk
            .iter()
            .map(|e| match scorer.score_examples(std::slice::from_ref(e)) {
                Ok(s) => Ok(judge(scorer, e, &s[0], cfg)),
                Err(err) if is_fatal(&err) => Err(err),
                Err(err) => Ok(Verdict::Error(err.to_string())),
            })
            .collect(),
    }
}

/// Connection-level failures abort the run instead of marking examples.
fn is_fatal(err: &Error) -> bool {
    matches!(
        err,
        Error::Scorer(ScorerError::Transport(_) | ScorerError::Timeout(_) | ScorerError::Handshake(_))
    )
}

fn judge<S: Scorer + ?Sized>(
    scorer: &CandidateScorer<'_, S>,
    example: &MaskedExample,
    scores: &[CandidateScore],
    cfg: &FilterConfig,
) -> Verdict {
    let text = match cfg.whole_word_scope {
        WholeWordScope::Sentence => example.fill(example.answer_idx),
        WholeWordScope::Candidates => example.candidates.join(" "),
    };
    let frac = match whole_word_fraction(scorer.vocab, &text, cfg.whole_word_basis) {
        Ok(f) => f,
        Err(e) => return Verdict::Error(e.to_string()),
    };
    let mut passes = v_scores(scores, example.answer_idx)
        .into_iter()
        .map(|v| passes_filter(v, frac, cfg));
    let keep = match cfg.pair_rule {
        PairRule::All => passes.all(|p| p),
        PairRule::Any => passes.any(|p| p),
    };
    if keep {
        Verdict::Keep
    } else {
        Verdict::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityCategory {
    Unsolvable,
    Hard,
    Easy,
    Noise,
}

impl std::str::FromStr for QualityCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unsolvable" => Ok(QualityCategory::Unsolvable),
            "hard" => Ok(QualityCategory::Hard),
            "easy" => Ok(QualityCategory::Easy),
            "noise" => Ok(QualityCategory::Noise),
            other => Err(format!(
                "unknown category {other:?} (expected unsolvable, hard, easy or noise)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityTally {
    pub unsolvable: usize,
    pub hard: usize,
    pub easy: usize,
    pub noise: usize,
    pub sample_size: usize,
}

impl QualityTally {
    pub fn add(&mut self, c: QualityCategory) {
        match c {
            QualityCategory::Unsolvable => self.unsolvable += 1,
            QualityCategory::Hard => self.hard += 1,
            QualityCategory::Easy => self.easy += 1,
            QualityCategory::Noise => self.noise += 1,
        }
        self.sample_size += 1;
    }

    /// Percentages in the order unsolvable, hard, easy, noise; all zero for
    /// an empty tally.
    pub fn percentages(&self) -> [f64; 4] {
        if self.sample_size == 0 {
            return [0.0; 4];
        }
        let n = self.sample_size as f64;
        [self.unsolvable, self.hard, self.easy, self.noise].map(|c| 100.0 * c as f64 / n)
    }
}

/// Seeded uniform sample of `n` examples without replacement, in dataset
/// order.
pub fn audit_sample(dataset: &[MaskedExample], n: usize, seed: u64) -> Result<Vec<MaskedExample>> {
    if n > dataset.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} examples from {}",
            dataset.len()
        )));
    }
    let mut picks = index::sample(&mut seeded_rng(seed, "audit"), dataset.len(), n).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Reads `example_id<TAB>category` lines.
pub fn tally_audit<R: BufRead>(labels: R, name: &str) -> Result<QualityTally> {
    let mut tally = QualityTally::default();
    let mut seen = HashSet::new();
    for (n, line) in labels.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(name, n + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(name, n + 1, "expected example_id<TAB>category"))?;
        let category: QualityCategory = label.parse().map_err(|m| Error::parse(name, n + 1, m))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(name, n + 1, format!("example {id} labelled twice")));
        }
        tally.add(category);
    }
    Ok(tally)
}
