//! Mining masked examples from tagged sentences, plus dataset-level
//! operations: hash-based downsampling, pair splits, and overlap removal.
//!
//! A sentence yields an example for every noun that occurs at least twice.
//! The second occurrence is masked, the first occurrence's surface form is
//! the answer, and every other distinct noun of the sentence is a
//! distractor.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, noun_positions, SentenceRecord};
use crate::digest::{seeded_hash, seeded_rng, sha256_hex};
use crate::error::{Error, Result};
use crate::wordpiece::MASK;

/// One masked sentence with its candidate fillers.
///
/// Field order is the on-disk field order of the dataset format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub id: String,
    pub masked_text: String,
    pub candidates: Vec<String>,
    pub answer_idx: usize,
    pub pair_id: Option<String>,
    pub source: String,
}

/// Case-insensitive, whitespace-collapsed form used to compare candidates
/// and texts.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl MaskedExample {
    pub fn answer(&self) -> &str {
        &self.candidates[self.answer_idx]
    }

    /// Masked text with `candidates[idx]` in place of the placeholder.
    pub fn fill(&self, idx: usize) -> String {
        self.masked_text.replacen(MASK, &self.candidates[idx], 1)
    }

    /// Text before and after the placeholder. Panics if there is none.
    pub fn context(&self) -> (&str, &str) {
        self.masked_text
            .split_once(MASK)
            .expect("masked_text contains the placeholder")
    }

    /// Checks the example invariants: one placeholder, at least two
    /// candidates, pairwise distinct after [`normalize`], answer in range.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("example {}: {m}", self.id)));
        let masks = self.masked_text.matches(MASK).count();
        if masks != 1 {
            return fail(format!("masked_text has {masks} placeholders"));
        }
        if self.candidates.len() < 2 {
            return fail(format!("{} candidates, need at least 2", self.candidates.len()));
        }
        if self.answer_idx >= self.candidates.len() {
            return fail(format!("answer_idx {} out of range", self.answer_idx));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            let n = normalize(c);
            if n.is_empty() {
                return fail("empty candidate".into());
            }
            if !seen.insert(n) {
                return fail(format!("duplicate candidate {c:?}"));
            }
        }
        Ok(())
    }

    /// Whether filling in the answer reproduces `source_text`. The filled
    /// slot is compared case-insensitively since the answer keeps the
    /// surface form of the noun's first occurrence.
    pub fn reproduces(&self, source_text: &str) -> bool {
        let (before, after) = self.context();
        source_text.len() >= before.len() + after.len()
            && source_text.starts_with(before)
            && source_text.ends_with(after)
            && source_text[before.len()..source_text.len() - after.len()].to_lowercase() == self.answer().to_lowercase()
    }
}

fn is_content_word(w: &str) -> bool {
    w.chars().any(char::is_alphanumeric)
}

/// Mines every example a single sentence yields, ordered by masked position.
pub fn generate_examples(record: &SentenceRecord) -> Vec<MaskedExample> {
    // normalized noun -> word indices, in first-occurrence order
    let mut order: Vec<String> = Vec::new();
    let mut occurrences: HashMap<String, Vec<usize>> = HashMap::new();
    for i in noun_positions(record) {
        let w = &record.words[i];
        if !is_content_word(w) {
            continue;
        }
        let key = normalize(w);
        occurrences
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }

    let mut out: Vec<(usize, MaskedExample)> = Vec::new();
    for key in &order {
        let occ = &occurrences[key];
        if occ.len() < 2 {
            continue;
        }
        let masked_pos = occ[1];
        let mut candidates = vec![record.words[occ[0]].clone()];
        candidates.extend(
            order
                .iter()
                .filter(|k| *k != key)
                .map(|k| record.words[occurrences[k][0]].clone()),
        );
        if candidates.len() < 2 {
            continue;
        }
        let mut words: Vec<&str> = record.words.iter().map(String::as_str).collect();
        words[masked_pos] = MASK;
        let id = sha256_hex(&[
            &record.doc_id,
            &record.sent_idx.to_string(),
            key,
            &masked_pos.to_string(),
        ]);
        out.push((
            masked_pos,
            MaskedExample {
                id: id[..16].to_string(),
                masked_text: detokenize(&words),
                candidates,
                answer_idx: 0,
                pair_id: None,
                source: format!("{}#{}", record.doc_id, record.sent_idx),
            },
        ));
    }
    out.sort_by_key(|(p, _)| *p);
    out.into_iter().map(|(_, e)| e).collect()
}

/// Generates over many records in parallel, keeping record order.
pub fn generate_all(records: &[SentenceRecord]) -> Vec<MaskedExample> {
    records
        .par_iter()
        .map(generate_examples)
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Validated sampling rate in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeepRate(f64);

impl KeepRate {
    pub fn new(rate: f64) -> Result<Self> {
        if rate > 0.0 && rate <= 1.0 {
            Ok(KeepRate(rate))
        } else {
            Err(Error::invalid(format!("keep rate {rate} not in (0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Keeps `id` iff `seeded_hash(seed, id) / 2^64 < rate`, compared exactly.
    pub fn keeps(self, seed: u64, id: &str) -> bool {
        if self.0 >= 1.0 {
            return true;
        }
        // rate * 2^64 is exact in f64; the cast truncates toward zero
        let threshold = (self.0 * 18_446_744_073_709_551_616.0) as u128;
        (seeded_hash(seed, id) as u128) < threshold
    }
}

/// Order-preserving Bernoulli thinning keyed on example ids.
pub fn downsample<I>(examples: I, rate: KeepRate, seed: u64) -> impl Iterator<Item = MaskedExample>
where
    I: IntoIterator<Item = MaskedExample>,
{
    examples.into_iter().filter(move |e| rate.keeps(seed, &e.id))
}

/// [`downsample`] over a slice using the current rayon pool.
pub fn downsample_par(examples: &[MaskedExample], rate: KeepRate, seed: u64) -> Vec<MaskedExample> {
    examples
        .par_iter()
        .filter(|e| rate.keeps(seed, &e.id))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// One member of every pair.
    NoPairs,
    /// Both members of half of the pairs.
    HalfPairs,
}

/// Halves a paired dataset. Pairs keep their original relative order.
///
/// With an odd number of pairs, `HalfPairs` keeps `floor(pairs / 2)` pairs.
pub fn split_pairs(dataset: &[MaskedExample], mode: PairMode, seed: u64) -> Result<Vec<MaskedExample>> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<&MaskedExample>> = HashMap::new();
    for e in dataset {
        let pid = e
            .pair_id
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("example {} has no pair_id", e.id)))?;
        members
            .entry(pid)
            .or_insert_with(|| {
                order.push(pid);
                Vec::new()
            })
            .push(e);
    }
    let mut bad: Vec<&str> = order.iter().copied().filter(|p| members[p].len() != 2).collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        return Err(Error::invalid(format!("incomplete pairs: {}", bad.join(", "))));
    }
    Ok(match mode {
        PairMode::NoPairs => order
            .iter()
            .map(|p| {
                let pick = seeded_rng(seed, p).gen_range(0..2);
                members[p][pick].clone()
            })
            .collect(),
        PairMode::HalfPairs => {
            let mut shuffled = order.clone();
            shuffled.shuffle(&mut seeded_rng(seed, "half-pairs"));
            let chosen: HashSet<&str> = shuffled[..order.len() / 2].iter().copied().collect();
            order
                .iter()
                .filter(|p| chosen.contains(*p))
                .flat_map(|p| members[p].iter().map(|e| (*e).clone()))
                .collect()
        }
    })
}

fn overlap_key(e: &MaskedExample) -> (String, BTreeSet<String>) {
    (
        normalize(&e.masked_text),
        e.candidates.iter().map(|c| normalize(c)).collect(),
    )
}

/// Drops training examples whose normalized text and candidate set both
/// match some evaluation example. Returns the survivors and the removed count.
pub fn remove_overlap(train: Vec<MaskedExample>, eval: &[MaskedExample]) -> (Vec<MaskedExample>, usize) {
    let keys: HashSet<_> = eval.iter().map(overlap_key).collect();
    let before = train.len();
    let kept: Vec<_> = train.into_iter().filter(|e| !keys.contains(&overlap_key(e))).collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Streams examples from a line-delimited JSON dataset file.
pub struct DatasetReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    name: String,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R, name: impl Into<String>) -> Self {
        DatasetReader {
            lines: reader.lines(),
            line_no: 0,
            name: name.into(),
        }
    }
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(DatasetReader::new(BufReader::new(f), path.display().to_string()))
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<MaskedExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::parse(&self.name, self.line_no, e.to_string()))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str::<MaskedExample>(&line)
                    .map_err(|e| Error::parse(&self.name, self.line_no, e.to_string()))
                    .and_then(|ex| {
                        ex.validate()
                            .map(|_| ex)
                            .map_err(|e| Error::parse(&self.name, self.line_no, e.to_string()))
                    }),
            );
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<MaskedExample>> {
    DatasetReader::open(path)?.collect()
}

pub fn write_dataset<'a, W, I>(mut out: W, examples: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a MaskedExample>,
{
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(tagged: &str) -> SentenceRecord {
        let (words, tags): (Vec<String>, Vec<String>) = tagged
            .split_whitespace()
            .map(|f| {
                let (w, t) = f.rsplit_once('/').unwrap();
                (w.to_string(), t.to_string())
            })
            .unzip();
        let raw = detokenize(&words);
        SentenceRecord::new("d1", 3, words, tags, raw).unwrap()
    }

    fn example(id: &str, text: &str, cands: &[&str], pair: Option<&str>) -> MaskedExample {
        MaskedExample {
            id: id.into(),
            masked_text: text.into(),
            candidates: cands.iter().map(|c| c.to_string()).collect(),
            answer_idx: 0,
            pair_id: pair.map(str::to_string),
            source: "test".into(),
        }
    }

    #[test]
    fn dog_cat_example() {
        let r = record("The/DT dog/NN chased/VBD the/DT cat/NN because/IN the/DT dog/NN was/VBD angry/JJ ./.");
        let out = generate_examples(&r);
        assert_eq!(out.len(), 1);
        let e = &out[0];
        assert_eq!(e.masked_text, "The dog chased the cat because the [MASK] was angry.");
        assert_eq!(e.candidates, ["dog", "cat"]);
        assert_eq!(e.answer_idx, 0);
        assert_eq!(e.source, "d1#3");
        assert!(e.reproduces(&r.raw_text));
        e.validate().unwrap();
    }

    #[test]
    fn no_repeats_no_examples() {
        let r = record("The/DT dog/NN saw/VBD the/DT cat/NN ./.");
        assert!(generate_examples(&r).is_empty());
    }

    #[test]
    fn repeat_without_distractor_is_skipped() {
        let r = record("The/DT dog/NN saw/VBD another/DT dog/NN ./.");
        assert!(generate_examples(&r).is_empty());
    }

    #[test]
    fn palmer_shape() {
        let r = record(
            "Palmer/NNP and/CC Crenshaw/NNP both/DT used/VBD Wilson/NNP 8802/CD putters/NNS ,/, with/IN Palmer/NNP 's/POS receiving/VBG the/DT moniker/NN",
        );
        let out = generate_examples(&r);
        assert_eq!(out.len(), 1);
        assert_eq!(
            out[0].masked_text,
            "Palmer and Crenshaw both used Wilson 8802 putters, with [MASK]'s receiving the moniker"
        );
        assert_eq!(
            out[0].candidates,
            ["Palmer", "Crenshaw", "Wilson", "putters", "moniker"]
        );
    }

    #[test]
    fn third_occurrence_stays_and_case_folds() {
        let r = record("Dog/NNP bit/VBD a/DT man/NN ;/: the/DT dog/NN and/CC the/DT man/NN met/VBD another/DT dog/NN");
        let out = generate_examples(&r);
        // ordered by masked position: dog@6 then man@9
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].masked_text,
            "Dog bit a man; the [MASK] and the man met another dog"
        );
        assert_eq!(out[0].candidates, ["Dog", "man"]);
        assert_eq!(
            out[1].masked_text,
            "Dog bit a man; the dog and the [MASK] met another dog"
        );
        assert_eq!(out[1].candidates, ["man", "Dog"]);
        assert!(out.iter().all(|e| e.reproduces(&r.raw_text)));
        assert_ne!(out[0].id, out[1].id);
    }

    #[test]
    fn keep_rate_bounds() {
        assert!(KeepRate::new(0.0).is_err());
        assert!(KeepRate::new(1.5).is_err());
        assert!(KeepRate::new(f64::NAN).is_err());
        let all: Vec<_> = (0..500)
            .map(|i| example(&i.to_string(), "[MASK]", &["a", "b"], None))
            .collect();
        let kept: Vec<_> = downsample(all.clone(), KeepRate::new(1.0).unwrap(), 9).collect();
        assert_eq!(kept, all);
    }

    #[test]
    fn split_pair_sizes() {
        let ds = vec![
            example("a1", "[MASK] x", &["a", "b"], Some("p1")),
            example("a2", "[MASK] y", &["a", "b"], Some("p1")),
            example("b1", "[MASK] z", &["a", "b"], Some("p2")),
            example("b2", "[MASK] w", &["a", "b"], Some("p2")),
        ];
        let np = split_pairs(&ds, PairMode::NoPairs, 1).unwrap();
        assert_eq!(np.len(), 2);
        assert_ne!(np[0].pair_id, np[1].pair_id);
        let hp = split_pairs(&ds, PairMode::HalfPairs, 1).unwrap();
        assert_eq!(hp.len(), 2);
        assert_eq!(hp[0].pair_id, hp[1].pair_id);

        let err = split_pairs(&ds[..3], PairMode::NoPairs, 1).unwrap_err();
        assert!(err.to_string().contains("p2"));
        let mut unpaired = ds.clone();
        unpaired[0].pair_id = None;
        assert!(split_pairs(&unpaired, PairMode::HalfPairs, 1).is_err());
    }

    #[test]
    fn overlap_examples() {
        let train = vec![
            example(
                "t1",
                "The trophy did not fit because [MASK] was big.",
                &["trophy", "suitcase"],
                None,
            ),
            example("t2", "Other [MASK].", &["x", "y"], None),
        ];
        let (kept, removed) = remove_overlap(train.clone(), &[example("e", "x [MASK]", &["a", "b"], None)]);
        assert_eq!((kept.len(), removed), (2, 0));
        let eval = example(
            "e1",
            "the trophy  did not fit because [MASK] was big.",
            &["Suitcase", "Trophy"],
            None,
        );
        let (kept, removed) = remove_overlap(train, &[eval]);
        assert_eq!(removed, 1);
        assert_eq!(kept[0].id, "t2");
    }

    #[test]
    fn validate_rejects_bad_examples() {
        assert!(example("x", "no mask", &["a", "b"], None).validate().is_err());
        assert!(example("x", "[MASK] [MASK]", &["a", "b"], None).validate().is_err());
        assert!(example("x", "[MASK]", &["a"], None).validate().is_err());
        assert!(example("x", "[MASK]", &["a", "A"], None).validate().is_err());
        let mut e = example("x", "[MASK]", &["a", "b"], None);
        e.answer_idx = 2;
        assert!(e.validate().is_err());
    }

    #[test]
    fn dataset_lines_round_trip_and_report_line_numbers() {
        let e = example("x", "[MASK] ran.", &["a", "b"], Some("p"));
        let mut buf = Vec::new();
        write_dataset(&mut buf, [&e]).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"id\":\"x\",\"masked_text\":\"[MASK] ran.\",\"candidates\":[\"a\",\"b\"],\"answer_idx\":0,\"pair_id\":\"p\",\"source\":\"test\"}\n"
        );
        let text = format!("{line}\n{{\"id\":1}}\n");
        let got: Vec<_> = DatasetReader::new(std::io::Cursor::new(text), "ds").collect();
        assert_eq!(got[0].as_ref().unwrap(), &e);
        assert!(matches!(got[1], Err(Error::Parse { line: 3, .. })));
    }

    proptest! {
        #[test]
        fn downsample_membership_is_order_independent(ids in proptest::collection::vec("[a-z0-9]{1,8}", 0..60), seed: u64, rate in 0.01f64..1.0) {
            let rate = KeepRate::new(rate).unwrap();
            let exs: Vec<_> = ids.iter().map(|i| example(i, "[MASK]", &["a", "b"], None)).collect();
            let kept: Vec<_> = downsample(exs.clone(), rate, seed).collect();
            let mut rev = exs.clone();
            rev.reverse();
            let mut kept_rev: Vec<_> = downsample(rev, rate, seed).collect();
            kept_rev.reverse();
            prop_assert_eq!(&kept, &kept_rev);
            let again: Vec<_> = downsample(kept.clone(), KeepRate::new(1.0).unwrap(), seed).collect();
            prop_assert_eq!(&again, &kept);
            prop_assert_eq!(downsample_par(&exs, rate, seed), kept);
        }

        #[test]
        fn generated_examples_hold_invariants(
            nouns in proptest::collection::vec(0usize..4, 1..14),
        ) {
            let vocab = ["dog", "Cat", "trophy", "suitcase"];
            let mut tagged = Vec::new();
            for n in &nouns {
                tagged.push(format!("the/DT {}/NN", vocab[*n]));
                tagged.push("saw/VBD".to_string());
            }
            let r = record(&tagged.join(" "));
            let out = generate_examples(&r);
            let mut masked_nouns = HashSet::new();
            for e in &out {
                e.validate().unwrap();
                prop_assert!(e.reproduces(&r.raw_text));
                prop_assert!(masked_nouns.insert(normalize(e.answer())));
                // masked slot is the second occurrence of the answer noun
                let key = normalize(e.answer());
                let occ: Vec<usize> = nouns.iter().enumerate().filter(|(_, n)| normalize(vocab[**n]) == key).map(|(i, _)| i).collect();
                let masked_word = r.words.iter().enumerate().filter(|(_, w)| normalize(w) == key).nth(1).unwrap().0;
                prop_assert_eq!(masked_word, occ[1] * 3 + 1);
            }
            let distinct: HashSet<_> = nouns.iter().collect();
            let repeated = distinct.iter().filter(|n| nouns.iter().filter(|m| m == *n).count() >= 2).count();
            let expected = if distinct.len() >= 2 { repeated } else { 0 };
            prop_assert_eq!(out.len(), expected);
        }
    }
}
