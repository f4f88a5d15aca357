//! Command-line entry point: argument parsing, config files, manifests and
//! exit codes.
//!
//! Every flag may also come from a TOML file passed with `--config`. Keys are
//! the flag names without the leading dashes. Top-level keys apply to every
//! subcommand that has such a flag; keys inside a `[subcommand]` table apply
//! to that subcommand only and win over top-level keys. Flags given on the
//! command line win over both.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{load_corpus, BaselineTagger, CorpusFormat, Pipeline, Segmenter};
use crate::digest::file_sha256;
use crate::error::{Error, ScorerError};
use crate::evaluator::{
    evaluate_wnli, evaluate_wsc, read_annotations, read_wnli_tsv, render_report, ConsistencyMode, MetricsReport,
    WscPrediction,
};
use crate::filter::{audit_sample, filter_dataset, tally_audit, FilterConfig, PairRule, WholeWordScope};
use crate::generator::{
    downsample_par, generate_all, read_dataset, remove_overlap, split_pairs, write_dataset, KeepRate, MaskedExample,
    PairMode,
};
use crate::scoring::{
    fit_baseline_scorer, pair_loss, predict_from_scores, remote_scorer, serve, serve_tcp, CachedScorer, CandidateScore,
    CandidateScorer, Endpoint, LossParams, Masking, RemoteOptions, Scorer,
};
use crate::wordpiece::{Vocab, WholeWordBasis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SCORER: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "wsckit",
    version,
    about = "Mine masked-noun examples and evaluate candidate scorers"
)]
pub struct Cli {
    /// TOML file supplying values for any flag; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads [default: available parallelism]. Output does not
    /// depend on this value.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine masked examples from a corpus.
    Generate(GenerateArgs),
    /// Keep a seeded, rate-controlled subset of a dataset.
    Downsample(DownsampleArgs),
    /// Build the no-pairs or half-pairs variant of a paired dataset.
    SplitPairs(SplitPairsArgs),
    /// Remove training examples that also occur in evaluation sets.
    Dedup(DedupArgs),
    /// Keep examples whose difficulty falls in the configured band.
    Filter(FilterArgs),
    /// Score every candidate, predict, and report pair losses.
    Score(ScoreArgs),
    /// Evaluate on an annotated WSC-style dataset.
    EvalWsc(EvalWscArgs),
    /// Evaluate on WNLI-format rows.
    EvalWnli(EvalWnliArgs),
    /// Draw a seeded sample for manual quality labelling.
    AuditSample(AuditSampleArgs),
    /// Summarize manual quality labels.
    AuditTally(AuditTallyArgs),
    /// Serve the unigram baseline scorer over the wire protocol.
    ServeBaseline(ServeBaselineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Downsample(_) => "downsample",
            Command::SplitPairs(_) => "split-pairs",
            Command::Dedup(_) => "dedup",
            Command::Filter(_) => "filter",
            Command::Score(_) => "score",
            Command::EvalWsc(_) => "eval-wsc",
            Command::EvalWnli(_) => "eval-wnli",
            Command::AuditSample(_) => "audit-sample",
            Command::AuditTally(_) => "audit-tally",
            Command::ServeBaseline(_) => "serve-baseline",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct GenerateArgs {
    /// Input corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus format [default: plain].
    #[arg(long, value_enum)]
    pub format: Option<CorpusFormat>,
    /// Output dataset (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Abbreviation list for sentence splitting [default: bundled].
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    /// Tagger lexicon [default: bundled].
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DownsampleArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep probability in [0, 1].
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SplitPairsArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<PairMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DedupArgs {
    /// Training dataset to clean.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Evaluation dataset; repeat for several.
    #[arg(long = "eval")]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How candidates get their log-probabilities.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ScorerArgs {
    /// `baseline`, `tcp://host:port` or `cmd:<program> [args]` [default: baseline].
    #[arg(long)]
    pub scorer: Option<String>,
    /// WordPiece vocabulary, one piece per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus the baseline scorer counts pieces in.
    #[arg(long)]
    pub fit_corpus: Option<PathBuf>,
    /// Format of the fit corpus [default: plain].
    #[arg(long, value_enum)]
    pub fit_format: Option<CorpusFormat>,
    /// Additive smoothing for the baseline [default: 1.0].
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Record scorer responses here and replay them on later runs.
    #[arg(long)]
    pub replay_cache: Option<PathBuf>,
    /// Seconds to wait for a remote reply [default: 30].
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Requests sent to a remote scorer before reading replies [default: 16].
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Multi-piece candidate querying [default: joint].
    #[arg(long, value_enum)]
    pub masking: Option<Masking>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Kept examples; statistics go to `<out>.stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub scorer: ScorerArgs,
    /// Lower edge of the v-score band, inclusive [default: -0.075].
    #[arg(long, allow_negative_numbers = true)]
    pub v_min: Option<f64>,
    /// Upper edge of the v-score band, inclusive [default: 0.30].
    #[arg(long, allow_negative_numbers = true)]
    pub v_max: Option<f64>,
    /// Minimum whole-word fraction [default: 0.90].
    #[arg(long)]
    pub min_whole_word_frac: Option<f64>,
    /// Whole-word denominator [default: pieces].
    #[arg(long, value_enum)]
    pub whole_word_basis: Option<WholeWordBasis>,
    /// Text the whole-word rule looks at [default: sentence].
    #[arg(long, value_enum)]
    pub whole_word_scope: Option<WholeWordScope>,
    /// Combination rule for examples with several distractors [default: all].
    #[arg(long, value_enum)]
    pub pair_rule: Option<PairRule>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Per-example scores, prediction and pair losses (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub scorer: ScorerArgs,
    /// Seed of the tie-breaking shuffle [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Margin weight [default: 20].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Margin [default: 0.2].
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalWscArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Annotation file (JSON lines keyed by example id).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Also evaluate these WNLI rows for the same report.
    #[arg(long)]
    pub wnli: Option<PathBuf>,
    /// Metrics and predictions (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub scorer: ScorerArgs,
    /// Seed of the tie-breaking shuffle [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Consistency definition [default: flip].
    #[arg(long, value_enum)]
    pub consistency_mode: Option<ConsistencyMode>,
    /// Leave unalignable WNLI rows out of the accuracy instead of counting
    /// them as wrong.
    #[arg(long)]
    pub exclude_skipped: bool,
    /// Row label in the printed table [default: model].
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalWnliArgs {
    /// WNLI rows: a header, then index, premise, hypothesis, label.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub scorer: ScorerArgs,
    /// Seed of the tie-breaking shuffle [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave unalignable rows out of the accuracy instead of counting them
    /// as wrong.
    #[arg(long)]
    pub exclude_skipped: bool,
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Row label in the printed table [default: model].
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct AuditSampleArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of examples to draw.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct AuditTallyArgs {
    /// Label file: `example_id<TAB>category` per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ServeBaselineArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub fit_corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fit_format: Option<CorpusFormat>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Listen on this TCP address instead of stdin/stdout.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        CliError::Run(Error::Scorer(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::Scorer(_)) => EXIT_SCORER,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Run(e) => e.fmt(f),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("wsckit: {e}");
            e.exit_code()
        }
    }
}

/// Runs an already parsed command line.
pub fn execute(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => toml::Table::new(),
    };
    let workers = match cli.workers {
        Some(w) => Some(w),
        None => match file.get("workers") {
            Some(v) => Some(
                v.as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| usage("config key workers must be a non-negative integer"))?,
            ),
            None => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| usage(format!("cannot start worker pool: {e}")))?;
    let name = cli.command.name();
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(overlay(a, &file, name)?),
        Command::Downsample(a) => cmd_downsample(overlay(a, &file, name)?),
        Command::SplitPairs(a) => cmd_split_pairs(overlay(a, &file, name)?),
        Command::Dedup(a) => cmd_dedup(overlay(a, &file, name)?),
        Command::Filter(a) => cmd_filter(overlay(a, &file, name)?),
        Command::Score(a) => cmd_score(overlay(a, &file, name)?),
        Command::EvalWsc(a) => cmd_eval_wsc(overlay(a, &file, name)?),
        Command::EvalWnli(a) => cmd_eval_wnli(overlay(a, &file, name)?),
        Command::AuditSample(a) => cmd_audit_sample(overlay(a, &file, name)?),
        Command::AuditTally(a) => cmd_audit_tally(overlay(a, &file, name)?),
        Command::ServeBaseline(a) => cmd_serve_baseline(overlay(a, &file, name)?),
    })
}

fn load_config_file(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Fills unset fields of `flags` from the config file.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: T, file: &toml::Table, section: &str) -> CliResult<T> {
    let mut merged = serde_json::to_value(&flags).expect("arguments serialize");
    let fields = merged.as_object_mut().expect("arguments serialize to a map");
    let mut from_file: Map<String, Value> = Map::new();
    for (k, v) in file {
        if !v.is_table() && fields.contains_key(k) {
            from_file.insert(k.clone(), toml_to_json(v)?);
        }
    }
    if let Some(sec) = file.get(section) {
        let sec = sec
            .as_table()
            .ok_or_else(|| usage(format!("config key {section} must be a table")))?;
        for (k, v) in sec {
            if !fields.contains_key(k) {
                return Err(usage(format!("config [{section}]: unknown key {k}")));
            }
            from_file.insert(k.clone(), toml_to_json(v)?);
        }
    }
    for (k, v) in from_file {
        let slot = fields.get_mut(&k).expect("checked above");
        if is_unset(slot) {
            *slot = v;
        }
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("config for {section}: {e}")))
}

fn toml_to_json(v: &toml::Value) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| usage(format!("config value {v}: {e}")))
}

fn need<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn input_path(v: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = need(v, flag)?;
    check_input(&p, flag)?;
    Ok(p)
}

fn check_input(p: &Path, flag: &str) -> CliResult<()> {
    if !p.is_file() {
        return Err(usage(format!("--{flag} {}: no such file", p.display())));
    }
    Ok(())
}

fn output_path(v: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = need(v, flag)?;
    let dir = parent_dir(&p);
    if !dir.is_dir() {
        return Err(usage(format!(
            "--{flag} {}: directory {} does not exist",
            p.display(),
            dir.display()
        )));
    }
    if p.is_dir() {
        return Err(usage(format!("--{flag} {} is a directory", p.display())));
    }
    Ok(p)
}

fn parent_dir(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
fn write_atomic<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = parent_dir(path);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: Value,
    seed: Option<u64>,
    /// Input path and its SHA-256.
    inputs: BTreeMap<String, String>,
    vocab_digest: Option<String>,
    scorer_digest: Option<String>,
}

impl Manifest {
    fn new<T: Serialize>(subcommand: &'static str, config: &T, seed: Option<u64>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config: serde_json::to_value(config).expect("arguments serialize"),
            seed,
            inputs: BTreeMap::new(),
            vocab_digest: None,
            scorer_digest: None,
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn write(&self, out: &Path) -> CliResult<()> {
        write_json(&sidecar(out, ".manifest.json"), self)
    }
}

fn pipeline(abbreviations: &Option<PathBuf>, lexicon: &Option<PathBuf>) -> CliResult<Pipeline> {
    let segmenter = match abbreviations {
        Some(p) => Segmenter::load(p)?,
        None => Segmenter::default(),
    };
    let tagger = match lexicon {
        Some(p) => BaselineTagger::load(p)?,
        None => BaselineTagger::bundled(),
    };
    Ok(Pipeline { segmenter, tagger })
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let corpus = input_path(&a.corpus, "corpus")?;
    let out = output_path(&a.out, "out")?;
    for (p, flag) in [(&a.abbreviations, "abbreviations"), (&a.lexicon, "lexicon")] {
        if let Some(p) = p {
            check_input(p, flag)?;
        }
    }
    let pipe = pipeline(&a.abbreviations, &a.lexicon)?;
    let records =
        load_corpus(&corpus, a.format.unwrap_or(CorpusFormat::Plain), &pipe)?.collect::<Result<Vec<_>, _>>()?;
    let examples = generate_all(&records);
    write_atomic(&out, |w| write_dataset(w, &examples))?;
    let mut m = Manifest::new("generate", &a, None);
    m.input(&corpus)?;
    for p in [&a.abbreviations, &a.lexicon].into_iter().flatten() {
        m.input(p)?;
    }
    m.write(&out)?;
    eprintln!("{} sentences, {} examples", records.len(), examples.len());
    Ok(())
}

fn need_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| usage("--seed is required for sampling subcommands"))
}

fn cmd_downsample(a: DownsampleArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let seed = need_seed(a.seed)?;
    let rate = KeepRate::new(need(&a.rate, "rate")?).map_err(|e| usage(e.to_string()))?;
    let data = read_dataset(&input)?;
    let kept = downsample_par(&data, rate, seed);
    write_atomic(&out, |w| write_dataset(w, &kept))?;
    let mut m = Manifest::new("downsample", &a, Some(seed));
    m.input(&input)?;
    m.write(&out)?;
    eprintln!("kept {} of {}", kept.len(), data.len());
    Ok(())
}

fn cmd_split_pairs(a: SplitPairsArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let seed = need_seed(a.seed)?;
    let mode = need(&a.mode, "mode")?;
    let data = read_dataset(&input)?;
    let split = split_pairs(&data, mode, seed)?;
    write_atomic(&out, |w| write_dataset(w, &split))?;
    let mut m = Manifest::new("split-pairs", &a, Some(seed));
    m.input(&input)?;
    m.write(&out)?;
    eprintln!("{} of {} examples", split.len(), data.len());
    Ok(())
}

fn cmd_dedup(a: DedupArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    if a.eval.is_empty() {
        return Err(usage("--eval is required"));
    }
    for p in &a.eval {
        check_input(p, "eval")?;
    }
    let train = read_dataset(&input)?;
    let mut eval = Vec::new();
    for p in &a.eval {
        eval.extend(read_dataset(p)?);
    }
    let before = train.len();
    let (kept, removed) = remove_overlap(train, &eval);
    write_atomic(&out, |w| write_dataset(w, &kept))?;
    let mut m = Manifest::new("dedup", &a, None);
    m.input(&input)?;
    for p in &a.eval {
        m.input(p)?;
    }
    m.write(&out)?;
    eprintln!("removed {removed} of {before}");
    Ok(())
}

/// A ready scorer plus the vocabulary it was built for.
struct ScorerSetup {
    vocab: Vocab,
    scorer: Box<dyn Scorer>,
    masking: Masking,
}

impl ScorerSetup {
    fn candidate_scorer(&self) -> CandidateScorer<'_, dyn Scorer> {
        CandidateScorer::new(self.scorer.as_ref(), &self.vocab).with_masking(self.masking)
    }
}

fn check_scorer_paths(a: &ScorerArgs) -> CliResult<()> {
    input_path(&a.vocab, "vocab")?;
    if let Some(p) = &a.fit_corpus {
        check_input(p, "fit-corpus")?;
    }
    if let Some(p) = &a.replay_cache {
        let dir = parent_dir(p);
        if !dir.is_dir() {
            return Err(usage(format!(
                "--replay-cache {}: directory {} does not exist",
                p.display(),
                dir.display()
            )));
        }
    }
    Ok(())
}

fn fit_baseline(
    vocab: &Vocab,
    fit_corpus: &Option<PathBuf>,
    fit_format: Option<CorpusFormat>,
    smoothing: Option<f64>,
) -> CliResult<crate::scoring::UnigramScorer> {
    let corpus = input_path(fit_corpus, "fit-corpus")?;
    let pipe = Pipeline::default();
    let records =
        load_corpus(&corpus, fit_format.unwrap_or(CorpusFormat::Plain), &pipe)?.collect::<Result<Vec<_>, _>>()?;
    Ok(fit_baseline_scorer(records, vocab, smoothing.unwrap_or(1.0))?)
}

fn build_scorer(a: &ScorerArgs) -> CliResult<ScorerSetup> {
    check_scorer_paths(a)?;
    let vocab = Vocab::load(&need(&a.vocab, "vocab")?)?;
    let spec = a.scorer.as_deref().unwrap_or("baseline");
    let inner: Box<dyn Scorer> = if spec == "baseline" {
        Box::new(fit_baseline(&vocab, &a.fit_corpus, a.fit_format, a.smoothing)?)
    } else {
        let endpoint: Endpoint = spec.parse().map_err(|m: String| usage(format!("--scorer: {m}")))?;
        let mut opts = RemoteOptions::default();
        if let Some(t) = a.timeout {
            if !(t > 0.0 && t.is_finite()) {
                return Err(usage("--timeout must be a positive number of seconds"));
            }
            opts.timeout = Duration::from_secs_f64(t);
        }
        if let Some(n) = a.max_in_flight {
            if n == 0 {
                return Err(usage("--max-in-flight must be at least 1"));
            }
            opts.max_in_flight = n;
        }
        Box::new(remote_scorer(&endpoint, vocab.digest(), opts)?)
    };
    let scorer: Box<dyn Scorer> = match &a.replay_cache {
        Some(p) => Box::new(CachedScorer::open(inner, p)?),
        None => inner,
    };
    Ok(ScorerSetup {
        vocab,
        scorer,
        masking: a.masking.unwrap_or_default(),
    })
}

fn scorer_manifest(m: &mut Manifest, a: &ScorerArgs, setup: &ScorerSetup) -> CliResult<()> {
    for p in [&a.vocab, &a.fit_corpus].into_iter().flatten() {
        m.input(p)?;
    }
    m.vocab_digest = Some(setup.vocab.digest().to_string());
    m.scorer_digest = Some(setup.scorer.digest());
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let defaults = FilterConfig::default();
    let cfg = FilterConfig {
        v_min: a.v_min.unwrap_or(defaults.v_min),
        v_max: a.v_max.unwrap_or(defaults.v_max),
        min_whole_word_frac: a.min_whole_word_frac.unwrap_or(defaults.min_whole_word_frac),
        whole_word_basis: a.whole_word_basis.unwrap_or_default(),
        whole_word_scope: a.whole_word_scope.unwrap_or_default(),
        pair_rule: a.pair_rule.unwrap_or_default(),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let setup = build_scorer(&a.scorer)?;
    let data = read_dataset(&input)?;
    let result = filter_dataset(&setup.candidate_scorer(), data, &cfg)?;
    write_atomic(&out, |w| write_dataset(w, &result.kept))?;
    #[derive(Serialize)]
    struct Report<'a> {
        stats: &'a crate::filter::FilterStats,
        rejected: &'a [String],
        errored: &'a [(String, String)],
    }
    write_json(
        &sidecar(&out, ".stats.json"),
        &Report {
            stats: &result.stats,
            rejected: &result.rejected,
            errored: &result.errored,
        },
    )?;
    let mut m = Manifest::new("filter", &a, None);
    m.input(&input)?;
    scorer_manifest(&mut m, &a.scorer, &setup)?;
    m.write(&out)?;
    let s = &result.stats;
    eprintln!(
        "kept {} of {} ({:.4}); rejected {}, errored {}",
        s.kept, s.total, s.keep_rate, s.rejected, s.errored
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    scores: &'a [CandidateScore],
    predicted: usize,
    correct: bool,
    /// One loss per distractor, in candidate order; `null` when not finite.
    pair_losses: Vec<Option<f64>>,
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let defaults = LossParams::default();
    let params = LossParams::new(a.alpha.unwrap_or(defaults.alpha), a.beta.unwrap_or(defaults.beta))
        .map_err(|e| usage(e.to_string()))?;
    let seed = a.seed.unwrap_or(0);
    let setup = build_scorer(&a.scorer)?;
    let data = read_dataset(&input)?;
    let scores = setup.candidate_scorer().score_examples(&data)?;
    let mut correct = 0usize;
    write_atomic(&out, |w| {
        for (e, s) in data.iter().zip(&scores) {
            let predicted = predict_from_scores(e, s, seed);
            correct += (predicted == e.answer_idx) as usize;
            let lc = s[e.answer_idx].avg_log_prob;
            let pair_losses = s
                .iter()
                .filter(|c| c.candidate_idx != e.answer_idx)
                .map(|c| Some(pair_loss(lc, c.avg_log_prob, params)).filter(|l| l.is_finite()))
                .collect();
            let line = ScoreLine {
                id: &e.id,
                scores: s,
                predicted,
                correct: predicted == e.answer_idx,
                pair_losses,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let mut m = Manifest::new("score", &a, Some(seed));
    m.input(&input)?;
    scorer_manifest(&mut m, &a.scorer, &setup)?;
    m.write(&out)?;
    eprintln!("{correct} of {} predicted correctly", data.len());
    Ok(())
}

fn read_wnli_rows(path: &Path) -> CliResult<Vec<crate::evaluator::WnliRow>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_wnli_tsv(BufReader::new(f), &path.display().to_string())?)
}

fn cmd_eval_wsc(a: EvalWscArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let annotations_path = input_path(&a.annotations, "annotations")?;
    if let Some(p) = &a.wnli {
        check_input(p, "wnli")?;
    }
    let out = output_path(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let setup = build_scorer(&a.scorer)?;
    let data = read_dataset(&input)?;
    let annotations = read_annotations(&annotations_path)?;
    let cs = setup.candidate_scorer();
    let (wsc, predictions) = evaluate_wsc(&cs, &data, &annotations, seed, a.consistency_mode.unwrap_or_default())?;
    let wnli = match &a.wnli {
        Some(p) => Some(evaluate_wnli(
            &cs,
            &read_wnli_rows(p)?,
            &Pipeline::default(),
            seed,
            !a.exclude_skipped,
        )?),
        None => None,
    };
    let report = MetricsReport { wsc: Some(wsc), wnli };
    #[derive(Serialize)]
    struct Output<'a> {
        metrics: &'a MetricsReport,
        predictions: &'a [WscPrediction],
    }
    write_json(
        &out,
        &Output {
            metrics: &report,
            predictions: &predictions,
        },
    )?;
    let mut m = Manifest::new("eval-wsc", &a, Some(seed));
    m.input(&input)?;
    m.input(&annotations_path)?;
    if let Some(p) = &a.wnli {
        m.input(p)?;
    }
    scorer_manifest(&mut m, &a.scorer, &setup)?;
    m.write(&out)?;
    print!("{}", render_report(&report, a.label.as_deref().unwrap_or("model")));
    Ok(())
}

fn cmd_eval_wnli(a: EvalWnliArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    for (p, flag) in [(&a.abbreviations, "abbreviations"), (&a.lexicon, "lexicon")] {
        if let Some(p) = p {
            check_input(p, flag)?;
        }
    }
    let seed = a.seed.unwrap_or(0);
    let pipe = pipeline(&a.abbreviations, &a.lexicon)?;
    let setup = build_scorer(&a.scorer)?;
    let rows = read_wnli_rows(&input)?;
    let wnli = evaluate_wnli(&setup.candidate_scorer(), &rows, &pipe, seed, !a.exclude_skipped)?;
    for (idx, reason) in &wnli.skipped {
        eprintln!("row {idx} skipped: {reason}");
    }
    let report = MetricsReport {
        wsc: None,
        wnli: Some(wnli),
    };
    write_json(&out, &report)?;
    let mut m = Manifest::new("eval-wnli", &a, Some(seed));
    m.input(&input)?;
    for p in [&a.abbreviations, &a.lexicon].into_iter().flatten() {
        m.input(p)?;
    }
    scorer_manifest(&mut m, &a.scorer, &setup)?;
    m.write(&out)?;
    print!("{}", render_report(&report, a.label.as_deref().unwrap_or("model")));
    Ok(())
}

fn cmd_audit_sample(a: AuditSampleArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let seed = need_seed(a.seed)?;
    let size = need(&a.size, "size")?;
    let data = read_dataset(&input)?;
    let sample: Vec<MaskedExample> = audit_sample(&data, size, seed)?;
    write_atomic(&out, |w| write_dataset(w, &sample))?;
    let mut m = Manifest::new("audit-sample", &a, Some(seed));
    m.input(&input)?;
    m.write(&out)?;
    Ok(())
}

fn cmd_audit_tally(a: AuditTallyArgs) -> CliResult<()> {
    let input = input_path(&a.input, "input")?;
    let out = output_path(&a.out, "out")?;
    let f = File::open(&input).map_err(|e| Error::io(&input, e))?;
    let tally = tally_audit(BufReader::new(f), &input.display().to_string())?;
    let [unsolvable, hard, easy, noise] = tally.percentages();
    #[derive(Serialize, Deserialize)]
    struct Percentages {
        unsolvable: f64,
        hard: f64,
        easy: f64,
        noise: f64,
    }
    #[derive(Serialize)]
    struct Output {
        counts: crate::filter::QualityTally,
        percentages: Percentages,
    }
    write_json(
        &out,
        &Output {
            counts: tally,
            percentages: Percentages {
                unsolvable,
                hard,
                easy,
                noise,
            },
        },
    )?;
    let mut m = Manifest::new("audit-tally", &a, None);
    m.input(&input)?;
    m.write(&out)?;
    eprintln!(
        "{} labelled: unsolvable {unsolvable:.1}%, hard {hard:.1}%, easy {easy:.1}%, noise {noise:.1}%",
        tally.sample_size
    );
    Ok(())
}

fn cmd_serve_baseline(a: ServeBaselineArgs) -> CliResult<()> {
    let vocab_path = input_path(&a.vocab, "vocab")?;
    input_path(&a.fit_corpus, "fit-corpus")?;
    let vocab = Vocab::load(&vocab_path)?;
    let scorer = fit_baseline(&vocab, &a.fit_corpus, a.fit_format, a.smoothing)?;
    let digest = vocab.digest().to_string();
    match &a.listen {
        None => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            serve(&scorer, &digest, stdin.lock(), stdout.lock()).map_err(ScorerError::Transport)?;
        }
        Some(addr) => {
            let listener = std::net::TcpListener::bind(addr).map_err(ScorerError::Transport)?;
            let local = listener.local_addr().map_err(ScorerError::Transport)?;
            eprintln!("listening on tcp://{local}");
            serve_tcp(listener, Arc::new(scorer), digest).map_err(ScorerError::Transport)?;
        }
    }
    Ok(())
}
