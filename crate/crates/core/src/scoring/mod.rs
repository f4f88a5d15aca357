//! Candidate scoring with a masked-token probability provider.
//!
//! A candidate of `k` pieces is scored by replacing the placeholder with `k`
//! mask slots and averaging the natural-log probabilities the scorer assigns
//! to the candidate's pieces at those slots. The candidate with the highest
//! average wins. The same averaged value feeds the margin loss
//!
//! ```text
//! L = -log P(c1|s) + alpha * max(0, log P(c2|s) - log P(c1|s) + beta)
//! ```
//!
//! where `c1` is the correct candidate and `c2` an incorrect one.

mod baseline;
mod cache;
pub mod protocol;
mod remote;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use baseline::{fit_baseline_scorer, UnigramScorer};
pub use cache::CachedScorer;
pub use protocol::{serve, serve_tcp, ScorerRequest, ScorerResponse, PROTOCOL_VERSION};
pub use remote::{remote_scorer, Endpoint, RemoteOptions, RemoteScorer};

use crate::digest::seeded_rng;
use crate::error::{Error, Result, ScorerError};
use crate::generator::MaskedExample;
use crate::wordpiece::{Vocab, CLS, MASK, SEP};

/// Anything that can fill mask slots with log-probabilities.
///
/// `score` answers requests in order, one log-probability per mask
/// position. Implementations must be callable from several threads.
pub trait Scorer: Send + Sync {
    /// Identity recorded in run manifests and filter stats.
    fn digest(&self) -> String;

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError>;
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn digest(&self) -> String {
        (**self).digest()
    }

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        (**self).score(requests)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn digest(&self) -> String {
        (**self).digest()
    }

    fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
        (**self).score(requests)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_idx: usize,
    pub piece_count: usize,
    /// Natural log; `-inf` when some piece had zero probability.
    #[serde(with = "protocol::nullable_f64")]
    pub avg_log_prob: f64,
}

/// How the `k` mask slots of a multi-piece candidate are queried.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Masking {
    /// All slots masked at once, one query.
    #[default]
    Joint,
    /// Left to right: slot `i` is queried with slots `0..i` filled in.
    Incremental,
}

/// Turns examples into scorer requests and responses into candidate scores.
#[derive(Debug, Clone, Copy)]
pub struct CandidateScorer<'a, S: ?Sized> {
    pub scorer: &'a S,
    pub vocab: &'a Vocab,
    pub masking: Masking,
}

impl<'a, S: Scorer + ?Sized> CandidateScorer<'a, S> {
    pub fn new(scorer: &'a S, vocab: &'a Vocab) -> Self {
        CandidateScorer {
            scorer,
            vocab,
            masking: Masking::Joint,
        }
    }

    pub fn with_masking(mut self, masking: Masking) -> Self {
        self.masking = masking;
        self
    }

    /// Requests needed for one candidate (one under joint masking, `k`
    /// under incremental masking).
    pub fn requests(&self, example: &MaskedExample, idx: usize) -> Result<Vec<ScorerRequest>> {
        let (before, after) = example.context();
        let targets = self.vocab.tokenize(&example.candidates[idx]);
        if targets.is_empty() {
            return Err(Error::invalid(format!(
                "example {}: candidate {idx} has no pieces",
                example.id
            )));
        }
        let mut pieces = vec![CLS.to_string()];
        pieces.extend(self.vocab.tokenize(before));
        let first = pieces.len();
        pieces.extend(std::iter::repeat_n(MASK.to_string(), targets.len()));
        pieces.extend(self.vocab.tokenize(after));
        pieces.push(SEP.to_string());
        let positions: Vec<usize> = (first..first + targets.len()).collect();
        let id = format!("{}:{idx}", example.id);
        Ok(match self.masking {
            Masking::Joint => vec![ScorerRequest {
                id,
                pieces,
                mask_positions: positions,
                targets,
            }],
            Masking::Incremental => (0..targets.len())
                .map(|step| {
                    let mut p = pieces.clone();
                    p[first..first + step].clone_from_slice(&targets[..step]);
                    ScorerRequest {
                        id: format!("{id}:{step}"),
                        pieces: p,
                        mask_positions: vec![first + step],
                        targets: vec![targets[step].clone()],
                    }
                })
                .collect(),
        })
    }

    /// Scores every candidate of every example with as few scorer calls as
    /// the scorer allows (all requests go out in one batch).
    pub fn score_examples(&self, examples: &[MaskedExample]) -> Result<Vec<Vec<CandidateScore>>> {
        let mut requests = Vec::new();
        // (example, candidate, request count)
        let mut layout = Vec::new();
        for (ei, ex) in examples.iter().enumerate() {
            for ci in 0..ex.candidates.len() {
                let reqs = self.requests(ex, ci)?;
                layout.push((ei, ci, reqs.len()));
                requests.extend(reqs);
            }
        }
        let responses = self.scorer.score(&requests)?;
        check_responses(&requests, &responses)?;
        let mut out: Vec<Vec<CandidateScore>> = examples
            .iter()
            .map(|e| Vec::with_capacity(e.candidates.len()))
            .collect();
        let mut cursor = 0;
        for (ei, ci, n) in layout {
            let logs: Vec<f64> = responses[cursor..cursor + n]
                .iter()
                .flat_map(|r| r.log_probs.iter().copied())
                .collect();
            cursor += n;
            out[ei].push(CandidateScore {
                candidate_idx: ci,
                piece_count: logs.len(),
                avg_log_prob: mean(&logs),
            });
        }
        Ok(out)
    }

    pub fn candidate_log_prob(&self, example: &MaskedExample, idx: usize) -> Result<CandidateScore> {
        if idx >= example.candidates.len() {
            return Err(Error::invalid(format!("example {}: no candidate {idx}", example.id)));
        }
        let requests = self.requests(example, idx)?;
        let responses = self.scorer.score(&requests)?;
        check_responses(&requests, &responses)?;
        let logs: Vec<f64> = responses.iter().flat_map(|r| r.log_probs.iter().copied()).collect();
        Ok(CandidateScore {
            candidate_idx: idx,
            piece_count: logs.len(),
            avg_log_prob: mean(&logs),
        })
    }

    /// Index of the best-scoring candidate; see [`predict_from_scores`].
    pub fn predict(&self, example: &MaskedExample, seed: u64) -> Result<usize> {
        if example.candidates.len() < 2 {
            return Err(Error::invalid(format!(
                "example {}: prediction needs at least 2 candidates",
                example.id
            )));
        }
        let scores = self.score_examples(std::slice::from_ref(example))?.remove(0);
        Ok(predict_from_scores(example, &scores, seed))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Verifies the response ids and lengths against the requests.
pub fn check_responses(requests: &[ScorerRequest], responses: &[ScorerResponse]) -> Result<(), ScorerError> {
    if requests.len() != responses.len() {
        return Err(ScorerError::Protocol(format!(
            "{} responses for {} requests",
            responses.len(),
            requests.len()
        )));
    }
    for (q, r) in requests.iter().zip(responses) {
        if q.id != r.id {
            return Err(ScorerError::Protocol(format!(
                "response id {:?} does not match request {:?}",
                r.id, q.id
            )));
        }
        r.check_against(q)?;
    }
    Ok(())
}

/// Seeded permutation of candidate indices for one example.
pub fn candidate_order(seed: u64, example_id: &str, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, example_id));
    order
}

/// Argmax over `scores` visiting indices in `order`; the first maximum
/// met wins, so ties go to the earliest position in `order`.
pub fn argmax_in_order(scores: &[f64], order: &[usize]) -> usize {
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted candidate index: argmax of the averaged log-probabilities,
/// ties broken toward the lower position of a seeded shuffle of the
/// candidates.
pub fn predict_from_scores(example: &MaskedExample, scores: &[CandidateScore], seed: u64) -> usize {
    let values: Vec<f64> = scores.iter().map(|s| s.avg_log_prob).collect();
    let order = candidate_order(seed, &example.id, values.len());
    argmax_in_order(&values, &order)
}

/// Margin-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { alpha: 20.0, beta: 0.2 }
    }
}

impl LossParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "loss parameters must be finite and non-negative (alpha {alpha}, beta {beta})"
            )));
        }
        Ok(LossParams { alpha, beta })
    }
}

/// `-logp_correct + alpha * max(0, logp_incorrect - logp_correct + beta)`.
pub fn pair_loss(logp_correct: f64, logp_incorrect: f64, params: LossParams) -> f64 {
    let margin = (logp_incorrect - logp_correct + params.beta).max(0.0);
    -logp_correct + params.alpha * margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(text: &str, cands: &[&str]) -> MaskedExample {
        MaskedExample {
            id: "e".into(),
            masked_text: text.into(),
            candidates: cands.iter().map(|c| c.to_string()).collect(),
            answer_idx: 0,
            pair_id: None,
            source: "t".into(),
        }
    }

    /// Returns fixed log-probs per target piece regardless of context.
    struct Table(Vec<(&'static str, f64)>);

    impl Scorer for Table {
        fn digest(&self) -> String {
            "table".into()
        }
        fn score(&self, requests: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
            Ok(requests
                .iter()
                .map(|q| ScorerResponse {
                    id: q.id.clone(),
                    log_probs: q
                        .targets
                        .iter()
                        .map(|t| self.0.iter().find(|(p, _)| p == t).map_or(f64::NEG_INFINITY, |x| x.1))
                        .collect(),
                })
                .collect())
        }
    }

    fn vocab() -> Vocab {
        Vocab::from_pieces([
            "[MASK]", "[UNK]", "[CLS]", "[SEP]", "the", "dog", "cat", "##s", "ran", ".",
        ])
        .unwrap()
    }

    #[test]
    fn averages_piece_log_probs() {
        let v = vocab();
        let s = Table(vec![("dog", -1.0), ("##s", -3.0), ("cat", -0.7)]);
        let cs = CandidateScorer::new(&s, &v);
        let e = ex("the [MASK] ran.", &["dogs", "cat"]);
        let a = cs.candidate_log_prob(&e, 0).unwrap();
        assert_eq!((a.piece_count, a.avg_log_prob), (2, -2.0));
        let b = cs.candidate_log_prob(&e, 1).unwrap();
        assert_eq!((b.piece_count, b.avg_log_prob), (1, -0.7));
        assert!(cs.candidate_log_prob(&e, 2).is_err());
    }

    #[test]
    fn joint_request_layout() {
        let v = vocab();
        let s = Table(vec![]);
        let cs = CandidateScorer::new(&s, &v);
        let reqs = cs.requests(&ex("the [MASK] ran.", &["dogs", "cat"]), 0).unwrap();
        assert_eq!(reqs.len(), 1);
        let q = &reqs[0];
        assert_eq!(q.pieces, ["[CLS]", "the", "[MASK]", "[MASK]", "ran", ".", "[SEP]"]);
        assert_eq!(q.mask_positions, [2, 3]);
        assert_eq!(q.targets, ["dog", "##s"]);
        assert_eq!(q.id, "e:0");

        let inc = cs
            .with_masking(Masking::Incremental)
            .requests(&ex("the [MASK] ran.", &["dogs", "cat"]), 0)
            .unwrap();
        assert_eq!(inc.len(), 2);
        assert_eq!(inc[1].pieces[2..4], ["dog", "[MASK]"]);
        assert_eq!(inc[1].mask_positions, [3]);
    }

    #[test]
    fn incremental_matches_joint_for_context_free_scorer() {
        let v = vocab();
        let s = Table(vec![("dog", -1.0), ("##s", -3.0), ("cat", -0.7)]);
        let e = ex("the [MASK] ran.", &["dogs", "cat"]);
        let joint = CandidateScorer::new(&s, &v)
            .score_examples(std::slice::from_ref(&e))
            .unwrap();
        let inc = CandidateScorer::new(&s, &v)
            .with_masking(Masking::Incremental)
            .score_examples(std::slice::from_ref(&e))
            .unwrap();
        assert_eq!(joint, inc);
    }

    #[test]
    fn predict_examples() {
        let e = ex("[MASK]", &["a", "b"]);
        let sc = |v: &[f64]| -> Vec<CandidateScore> {
            v.iter()
                .enumerate()
                .map(|(i, &x)| CandidateScore {
                    candidate_idx: i,
                    piece_count: 1,
                    avg_log_prob: x,
                })
                .collect()
        };
        assert_eq!(predict_from_scores(&e, &sc(&[-1.0, -2.0]), 0), 0);
        assert_eq!(predict_from_scores(&e, &sc(&[-0.7, -1.7]), 0), 0);
        assert_eq!(argmax_in_order(&[-1.0, -1.0], &[0, 1]), 0);
        assert_eq!(argmax_in_order(&[-1.0, -1.0], &[1, 0]), 1);
        let tie = predict_from_scores(&e, &sc(&[-1.0, -1.0]), 5);
        assert_eq!(tie, candidate_order(5, "e", 2)[0]);
        // -inf loses to anything finite, and ties with another -inf
        assert_eq!(argmax_in_order(&[f64::NEG_INFINITY, -50.0], &[0, 1]), 1);
        assert_eq!(argmax_in_order(&[f64::NEG_INFINITY, f64::NEG_INFINITY], &[1, 0]), 1);
    }

    #[test]
    fn predict_requires_two_candidates() {
        let v = vocab();
        let s = Table(vec![]);
        assert!(CandidateScorer::new(&s, &v)
            .predict(&ex("[MASK]", &["dog"]), 0)
            .is_err());
    }

    #[test]
    fn mismatched_responses_are_protocol_errors() {
        struct Short;
        impl Scorer for Short {
            fn digest(&self) -> String {
                "short".into()
            }
            fn score(&self, r: &[ScorerRequest]) -> Result<Vec<ScorerResponse>, ScorerError> {
                Ok(r.iter()
                    .map(|q| ScorerResponse {
                        id: q.id.clone(),
                        log_probs: vec![],
                    })
                    .collect())
            }
        }
        let v = vocab();
        let err = CandidateScorer::new(&Short, &v)
            .candidate_log_prob(&ex("[MASK]", &["dog", "cat"]), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Scorer(ScorerError::Protocol(_))));
    }

    #[test]
    fn loss_examples() {
        let p = LossParams::default();
        assert_eq!((p.alpha, p.beta), (20.0, 0.2));
        assert!((pair_loss(-0.5, -2.0, p) - 0.5).abs() < 1e-12);
        assert!((pair_loss(-2.0, -1.0, p) - 26.0).abs() < 1e-12);
        let zero = LossParams::new(0.0, 0.2).unwrap();
        assert_eq!(pair_loss(-2.0, -1.0, zero), 2.0);
        assert!(LossParams::new(-1.0, 0.2).is_err());
        assert!(LossParams::new(1.0, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn loss_bounds_and_monotonicity(c in -20.0f64..0.0, i in -20.0f64..0.0, alpha in 0.0f64..30.0, beta in 0.0f64..1.0) {
            let p = LossParams::new(alpha, beta).unwrap();
            let l = pair_loss(c, i, p);
            prop_assert!(l >= -c);
            if c >= i + beta {
                prop_assert_eq!(l, -c);
            }
            let h = 1e-6;
            prop_assert!(pair_loss(c + h, i, p) <= l + 1e-9);
            prop_assert!(pair_loss(c, i + h, p) >= l - 1e-9);
        }

        #[test]
        fn argmax_is_shift_invariant(raw in proptest::collection::vec(-64i32..0, 2..8), shift in -16i32..16, seed: u64) {
            // multiples of 1/8 keep the shifted values exact
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 8.0).collect();
            let shifted: Vec<f64> = scores.iter().map(|x| x + shift as f64 / 8.0).collect();
            let order = candidate_order(seed, "x", scores.len());
            prop_assert_eq!(argmax_in_order(&scores, &order), argmax_in_order(&shifted, &order));
        }
    }
}
