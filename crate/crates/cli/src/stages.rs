//! Stage parameters and their execution.
//!
//! Every stage reads its inputs, writes its declared outputs and returns a
//! JSON report. Paths are used as given; resolution against a base
//! directory happens before a stage runs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mixkit_core::corpus::{self, Document, NormalizePolicy, Strictness};
use mixkit_core::dedup::{self, MinHasher};
use mixkit_core::filtering::{
    self, FilterRecord, FilterTally, FuzzyPairDedup, PairModels, ParallelCleanConfig, PplBand, RuleConfig,
};
use mixkit_core::mixplan::{self, BucketSpec, BudgetReport, ModelArch};
use mixkit_core::ngram_lm::{self, DiscountPolicy, NGramConfig, NGramModel};
use mixkit_core::scaling::{self, FitOptions};
use mixkit_core::tokenizer::{self, TokenizerConfig, TokenizerModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, Result};

pub const STAGE_KINDS: [&str; 12] = [
    "stats",
    "filter",
    "ppl-filter",
    "dedup-exact",
    "dedup-fuzzy",
    "clean-parallel",
    "train-lm",
    "train-tokenizer",
    "fertility",
    "plan-mix",
    "budget",
    "fit-scaling",
];

pub trait Stage {
    fn inputs(&self) -> Vec<&Path>;
    /// Declared outputs; the first is the primary artifact.
    fn outputs(&self) -> Vec<&Path>;
    fn paths_mut(&mut self) -> Vec<&mut PathBuf>;
    fn validate(&self) -> Result<()> {
        Ok(())
    }
    fn execute(&self, seed: u64) -> Result<Value>;
}

// ---------------------------------------------------------------------------
// IO helpers

fn strictness(skip_bad: bool) -> Strictness {
    if skip_bad {
        Strictness::SkipBad
    } else {
        Strictness::Strict
    }
}

fn read_docs(path: &Path, skip_bad: bool) -> Result<Vec<Document>> {
    let (docs, skipped) = corpus::read_jsonl(path, strictness(skip_bad))?;
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed records", path.display());
    }
    Ok(docs)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialization");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

fn write_docs<'a>(path: &Path, docs: impl IntoIterator<Item = &'a Document>) -> Result<()> {
    corpus::write_jsonl(create(path)?, docs).map_err(|e| CliError::io(path, e))
}

fn load_lm(path: &Path) -> Result<NGramModel> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(NGramModel::from_reader(BufReader::new(file))?)
}

fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    Ok(TokenizerModel::from_json(&read_text(path)?)?)
}

fn rejected_copy(doc: &Document, reason: &str) -> Document {
    let mut d = doc.clone();
    d.meta.insert(corpus::REJECTED_META_KEY.to_string(), "true".to_string());
    d.meta.insert("reject_reason".to_string(), reason.to_string());
    d
}

fn opt_vec(p: &Option<PathBuf>) -> Vec<&Path> {
    p.iter().map(PathBuf::as_path).collect()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Validation(msg()))
    }
}

// ---------------------------------------------------------------------------
// Defaults

fn yes() -> bool {
    true
}
fn d_num_perm() -> usize {
    dedup::DEFAULT_NUM_PERM
}
fn d_shingle_k() -> usize {
    dedup::DEFAULT_SHINGLE_K
}
fn d_pair_shingle_k() -> usize {
    3
}
fn d_bands() -> usize {
    dedup::DEFAULT_BANDS
}
fn d_rows() -> usize {
    dedup::DEFAULT_ROWS
}
fn d_threshold() -> f64 {
    dedup::DEFAULT_THRESHOLD
}
fn d_ratio_min() -> f64 {
    0.5
}
fn d_ratio_max() -> f64 {
    2.0
}
fn d_min_chars() -> usize {
    1
}
fn d_max_chars() -> usize {
    1024
}
fn d_quality() -> f64 {
    0.8
}
fn d_order() -> usize {
    5
}
fn d_one() -> u64 {
    1
}
fn d_vocab() -> usize {
    tokenizer::DEFAULT_VOCAB_SIZE
}
fn d_placeholders() -> usize {
    tokenizer::DEFAULT_PLACEHOLDERS
}
fn d_pue() -> f64 {
    1.0
}
fn d_param_unit() -> f64 {
    scaling::DEFAULT_PARAM_UNIT
}
fn d_max_iter() -> usize {
    scaling::DEFAULT_MAX_ITERATIONS
}
fn d_grid_steps() -> usize {
    20
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsParams {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Count tokens with this tokenizer instead of whitespace words.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for StatsParams {
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.input.as_path()];
        v.extend(opt_vec(&self.tokenizer));
        v
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output];
        v.extend(self.tokenizer.as_mut());
        v
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let tok = self.tokenizer.as_deref().map(load_tokenizer).transpose()?;
        let mut report = corpus::StatsReport::default();
        for doc in corpus::ingest_jsonl(&self.input, strictness(self.skip_bad))? {
            report.add(&doc?, tok.as_ref());
        }
        report.write_csv(create(&self.output)?)?;
        let t = report.totals();
        Ok(json!({
            "buckets": report.buckets.len(),
            "bytes": t.bytes,
            "docs": t.docs,
            "tokens": t.tokens,
            "tokens_per_doc": t.tokens_per_doc_rounded(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterParams {
    pub input: PathBuf,
    pub output: PathBuf,
    pub rules: PathBuf,
    /// Rejected documents, marked with the rejection reason.
    #[serde(default)]
    pub rejected: Option<PathBuf>,
    /// Per-document decisions and metrics.
    #[serde(default)]
    pub decisions: Option<PathBuf>,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for FilterParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input, &self.rules]
    }
    fn outputs(&self) -> Vec<&Path> {
        let mut v = vec![self.output.as_path()];
        v.extend(opt_vec(&self.rejected));
        v.extend(opt_vec(&self.decisions));
        v
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output, &mut self.rules];
        v.extend(self.rejected.as_mut());
        v.extend(self.decisions.as_mut());
        v
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let rules = RuleConfig::from_json(&read_text(&self.rules)?)?;
        let docs = read_docs(&self.input, self.skip_bad)?;
        let mut tally = FilterTally::default();
        let (mut kept, mut rejected, mut records) = (Vec::new(), Vec::new(), Vec::new());
        for doc in &docs {
            let decision = filtering::apply_rules(doc, &rules);
            tally.record(&decision);
            if decision.is_keep() {
                kept.push(doc);
            } else {
                rejected.push(rejected_copy(doc, &decision.reason));
            }
            records.push(FilterRecord { id: doc.id.clone(), decision });
        }
        write_docs(&self.output, kept)?;
        if let Some(path) = &self.rejected {
            write_docs(path, &rejected)?;
        }
        if let Some(path) = &self.decisions {
            let mut out = create(path)?;
            for r in &records {
                let line = serde_json::to_string(r).expect("record serialization");
                writeln!(out, "{line}").map_err(|e| CliError::io(path, e))?;
            }
            out.flush().map_err(|e| CliError::io(path, e))?;
        }
        Ok(serde_json::to_value(&tally).expect("tally serialization"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplFilterParams {
    pub input: PathBuf,
    pub output: PathBuf,
    pub model: PathBuf,
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub rejected: Option<PathBuf>,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for PplFilterParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input, &self.model]
    }
    fn outputs(&self) -> Vec<&Path> {
        let mut v = vec![self.output.as_path()];
        v.extend(opt_vec(&self.rejected));
        v
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output, &mut self.model];
        v.extend(self.rejected.as_mut());
        v
    }
    fn validate(&self) -> Result<()> {
        Ok(filtering::validate_band(self.low, self.high)?)
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let model = load_lm(&self.model)?;
        let docs = read_docs(&self.input, self.skip_bad)?;
        let mut tally = FilterTally::default();
        let (mut kept, mut rejected) = (Vec::new(), Vec::new());
        for doc in &docs {
            let decision = match filtering::perplexity_band_filter(doc, &model, self.low, self.high) {
                Ok(d) => d,
                Err(filtering::FilterError::EmptyText(_)) => filtering::FilterDecision {
                    verdict: filtering::Verdict::Reject,
                    reason: "empty_text".into(),
                    metrics: BTreeMap::new(),
                },
                Err(e) => return Err(e.into()),
            };
            tally.record(&decision);
            if decision.is_keep() {
                kept.push(doc);
            } else {
                rejected.push(rejected_copy(doc, &decision.reason));
            }
        }
        write_docs(&self.output, kept)?;
        if let Some(path) = &self.rejected {
            write_docs(path, &rejected)?;
        }
        Ok(serde_json::to_value(&tally).expect("tally serialization"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupExactParams {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub normalize: NormalizePolicy,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for DedupExactParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.input, &mut self.output]
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let docs = read_docs(&self.input, self.skip_bad)?;
        let input = docs.len();
        let (kept, report) = dedup::exact_dedup(docs, self.normalize);
        write_docs(&self.output, &kept)?;
        Ok(json!({ "input": input, "kept": kept.len(), "report": report }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupFuzzyParams {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default = "d_num_perm")]
    pub num_perm: usize,
    #[serde(default = "d_shingle_k")]
    pub shingle_k: usize,
    #[serde(default = "d_bands")]
    pub bands: usize,
    #[serde(default = "d_rows")]
    pub rows: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    /// Optional signature store for reuse across runs.
    #[serde(default)]
    pub signatures: Option<PathBuf>,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for DedupFuzzyParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        let mut v = vec![self.output.as_path()];
        v.extend(opt_vec(&self.signatures));
        v
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output];
        v.extend(self.signatures.as_mut());
        v
    }
    fn validate(&self) -> Result<()> {
        check(self.num_perm > 0 && self.shingle_k > 0, || "num_perm and shingle_k must be positive".into())?;
        check(self.bands * self.rows == self.num_perm, || {
            format!("bands ({}) x rows ({}) must equal num_perm ({})", self.bands, self.rows, self.num_perm)
        })?;
        check((0.0..=1.0).contains(&self.threshold), || format!("threshold {} outside [0, 1]", self.threshold))
    }
    fn execute(&self, seed: u64) -> Result<Value> {
        let docs = read_docs(&self.input, self.skip_bad)?;
        let input = docs.len();
        let hasher = MinHasher::new(self.num_perm, self.shingle_k, seed);
        let (kept, report, sigs) = dedup::fuzzy_dedup(docs, &hasher, self.bands, self.rows, self.threshold)?;
        write_docs(&self.output, &kept)?;
        if let Some(path) = &self.signatures {
            dedup::write_signatures(create(path)?, &hasher, &sigs).map_err(|e| CliError::io(path, e))?;
        }
        Ok(json!({
            "input": input,
            "kept": kept.len(),
            "collision_probability_at_threshold":
                dedup::lsh_collision_probability(self.threshold, self.bands, self.rows),
            "report": report,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanParallelParams {
    /// Pairs as TSV: src, tgt, src_lang, tgt_lang, quality.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Near-duplicate detection in addition to exact matching.
    #[serde(default = "yes")]
    pub fuzzy: bool,
    #[serde(default = "d_num_perm")]
    pub num_perm: usize,
    #[serde(default = "d_bands")]
    pub bands: usize,
    #[serde(default = "d_rows")]
    pub rows: usize,
    #[serde(default = "d_pair_shingle_k")]
    pub shingle_k: usize,
    #[serde(default = "d_threshold")]
    pub fuzzy_threshold: f64,
    #[serde(default = "d_ratio_min")]
    pub length_ratio_min: f64,
    #[serde(default = "d_ratio_max")]
    pub length_ratio_max: f64,
    #[serde(default = "d_min_chars")]
    pub min_chars: usize,
    #[serde(default = "d_max_chars")]
    pub max_chars: usize,
    #[serde(default = "d_quality")]
    pub quality_threshold: f64,
    #[serde(default)]
    pub src_model: Option<PathBuf>,
    #[serde(default)]
    pub tgt_model: Option<PathBuf>,
    #[serde(default)]
    pub src_ppl_band: Option<PplBand>,
    #[serde(default)]
    pub tgt_ppl_band: Option<PplBand>,
}

impl CleanParallelParams {
    fn core_config(&self, seed: u64) -> ParallelCleanConfig {
        ParallelCleanConfig {
            fuzzy: self.fuzzy.then_some(FuzzyPairDedup {
                num_perm: self.num_perm,
                bands: self.bands,
                rows: self.rows,
                shingle_k: self.shingle_k,
                threshold: self.fuzzy_threshold,
                seed,
            }),
            length_ratio_min: self.length_ratio_min,
            length_ratio_max: self.length_ratio_max,
            min_chars: self.min_chars,
            max_chars: self.max_chars,
            quality_threshold: self.quality_threshold,
            src_ppl_band: self.src_ppl_band,
            tgt_ppl_band: self.tgt_ppl_band,
        }
    }
}

impl Stage for CleanParallelParams {
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.input.as_path()];
        v.extend(opt_vec(&self.src_model));
        v.extend(opt_vec(&self.tgt_model));
        v
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output];
        v.extend(self.src_model.as_mut());
        v.extend(self.tgt_model.as_mut());
        v
    }
    fn validate(&self) -> Result<()> {
        self.core_config(0).validate()?;
        check(self.src_ppl_band.is_none() || self.src_model.is_some(), || "src_ppl_band needs src_model".into())?;
        check(self.tgt_ppl_band.is_none() || self.tgt_model.is_some(), || "tgt_ppl_band needs tgt_model".into())
    }
    fn execute(&self, seed: u64) -> Result<Value> {
        let src = self.src_model.as_deref().map(load_lm).transpose()?;
        let tgt = self.tgt_model.as_deref().map(load_lm).transpose()?;
        let file = File::open(&self.input).map_err(|e| CliError::io(&self.input, e))?;
        let pairs = filtering::read_pairs_tsv(BufReader::new(file))?;
        let models = PairModels { src: src.as_ref(), tgt: tgt.as_ref() };
        let (kept, report) = filtering::clean_parallel(pairs, &self.core_config(seed), models)?;
        filtering::write_pairs_tsv(create(&self.output)?, &kept).map_err(|e| CliError::io(&self.output, e))?;
        Ok(serde_json::to_value(&report).expect("report serialization"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLmParams {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default = "d_order")]
    pub order: usize,
    #[serde(default = "d_one")]
    pub min_count: u64,
    /// Fixed discount for every order; estimated from count statistics when absent.
    #[serde(default)]
    pub discount: Option<f64>,
    #[serde(default = "yes")]
    pub unigram_floor: bool,
    #[serde(default)]
    pub skip_bad: bool,
}

impl TrainLmParams {
    fn core_config(&self) -> NGramConfig {
        NGramConfig {
            order: self.order,
            min_count: self.min_count,
            discount: self.discount.map_or(DiscountPolicy::Estimate, DiscountPolicy::Fixed),
            unigram_floor: self.unigram_floor,
        }
    }
}

impl Stage for TrainLmParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.input, &mut self.output]
    }
    fn validate(&self) -> Result<()> {
        check(self.order >= 1, || "order must be at least 1".into())?;
        check(self.min_count >= 1, || "min_count must be at least 1".into())?;
        check(self.discount.is_none_or(|d| d > 0.0 && d < 1.0), || {
            format!("discount {:?} must lie in (0, 1)", self.discount)
        })
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let docs = read_docs(&self.input, self.skip_bad)?;
        let model = ngram_lm::train_ngram(&docs, self.core_config())?;
        write_bytes(&self.output, model.to_text().as_bytes())?;
        Ok(json!({
            "order": model.order(),
            "vocab": model.vocab().len(),
            "discounts": model.discounts(),
            "docs": docs.len(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTokenizerParams {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_placeholders")]
    pub placeholders: usize,
    #[serde(default)]
    pub skip_bad: bool,
}

impl Stage for TrainTokenizerParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.input, &mut self.output]
    }
    fn validate(&self) -> Result<()> {
        check(self.vocab_size >= tokenizer::BASE_VOCAB, || {
            format!("vocab_size {} is below the base vocabulary of {}", self.vocab_size, tokenizer::BASE_VOCAB)
        })
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let docs = read_docs(&self.input, self.skip_bad)?;
        let config = TokenizerConfig { vocab_size: self.vocab_size, placeholder_count: self.placeholders };
        let model = tokenizer::train_bpe(&docs, config)?;
        write_bytes(&self.output, model.to_json().as_bytes())?;
        Ok(json!({
            "requested_vocab": self.vocab_size,
            "merges": model.merges().len(),
            "vocab_len": model.vocab_len(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FertilityParams {
    /// Tokenizer files by display name. The reserved path `@bytes` selects
    /// the plain byte-level tokenizer.
    pub tokenizers: BTreeMap<String, PathBuf>,
    /// Evaluation corpora (JSONL) by display name.
    pub corpora: BTreeMap<String, PathBuf>,
    pub output: PathBuf,
    /// Pairwise relative efficiencies.
    #[serde(default)]
    pub relative_output: Option<PathBuf>,
    #[serde(default)]
    pub skip_bad: bool,
}

const BYTE_TOKENIZER: &str = "@bytes";

impl Stage for FertilityParams {
    fn inputs(&self) -> Vec<&Path> {
        self.tokenizers
            .values()
            .filter(|p| p.as_os_str() != BYTE_TOKENIZER)
            .chain(self.corpora.values())
            .map(PathBuf::as_path)
            .collect()
    }
    fn outputs(&self) -> Vec<&Path> {
        let mut v = vec![self.output.as_path()];
        v.extend(opt_vec(&self.relative_output));
        v
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v: Vec<&mut PathBuf> = self
            .tokenizers
            .values_mut()
            .filter(|p| p.as_os_str() != BYTE_TOKENIZER)
            .chain(self.corpora.values_mut())
            .collect();
        v.push(&mut self.output);
        v.extend(self.relative_output.as_mut());
        v
    }
    fn validate(&self) -> Result<()> {
        check(!self.tokenizers.is_empty() && !self.corpora.is_empty(), || {
            "fertility needs at least one tokenizer and one corpus".into()
        })?;
        check(self.tokenizers.len() >= 2 || self.corpora.len() >= 2, || {
            "fertility needs two tokenizers or two corpora to compare".into()
        })
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let models = self
            .tokenizers
            .iter()
            .map(|(name, path)| {
                let model = if path.as_os_str() == BYTE_TOKENIZER {
                    TokenizerModel::byte_level(0)
                } else {
                    load_tokenizer(path)?
                };
                Ok((name.as_str(), model))
            })
            .collect::<Result<Vec<_>>>()?;
        let corpora = self
            .corpora
            .iter()
            .map(|(name, path)| Ok((name.as_str(), read_docs(path, self.skip_bad)?)))
            .collect::<Result<Vec<_>>>()?;
        let model_refs: Vec<(&str, &TokenizerModel)> = models.iter().map(|(n, m)| (*n, m)).collect();
        let corpus_refs: Vec<(&str, &[Document])> = corpora.iter().map(|(n, d)| (*n, d.as_slice())).collect();
        let matrix = tokenizer::compare_fertility(&model_refs, &corpus_refs)?;
        matrix.write_csv(create(&self.output)?)?;
        if let Some(path) = &self.relative_output {
            matrix.write_relative_csv(create(path)?)?;
        }
        Ok(serde_json::to_value(&matrix).expect("matrix serialization"))
    }
}

/// One row of a mix specification file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixBucketInput {
    pub name: String,
    pub unique_tokens: u64,
    pub target_tokens: u64,
    #[serde(default)]
    pub epoch_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub buckets: Vec<MixBucketInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanMixParams {
    /// Mix specification (JSON).
    pub input: PathBuf,
    pub output: PathBuf,
}

impl Stage for PlanMixParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.input, &mut self.output]
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let spec: MixSpec = serde_json::from_str(&read_text(&self.input)?)
            .map_err(|e| CliError::validation(format!("{}: {e}", self.input.display())))?;
        let buckets: Vec<BucketSpec> = spec
            .buckets
            .iter()
            .map(|b| BucketSpec {
                name: b.name.clone(),
                unique_tokens: b.unique_tokens,
                target_tokens: b.target_tokens,
            })
            .collect();
        let plan = mixplan::solve_sampling_ratios(&buckets)?;
        let limits: BTreeMap<String, f64> =
            spec.buckets.iter().filter_map(|b| b.epoch_limit.map(|l| (b.name.clone(), l))).collect();
        let warnings = if limits.is_empty() { Vec::new() } else { mixplan::check_epoch_budget(&plan, &limits)? };
        for w in &warnings {
            log::warn!("bucket {} needs {:.2} epochs, over its limit of {}", w.bucket, w.epochs, w.limit);
        }
        write_json(&self.output, &json!({ "plan": plan, "epoch_warnings": warnings }))?;
        print!("{}", plan.table());
        Ok(
            json!({ "buckets": plan.buckets.len(), "total_tokens": plan.total_tokens, "epoch_warnings": warnings.len() }),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetParams {
    pub output: PathBuf,
    pub micro_batch: u64,
    pub seq_len: u64,
    pub grad_accum: u64,
    pub devices: u64,
    /// Training tokens.
    pub tokens_total: u64,
    /// Sustained throughput per GPU.
    pub mean_tflops: f64,
    pub gpu_hours: f64,
    /// Hours used for the energy estimate; defaults to `gpu_hours`.
    #[serde(default)]
    pub energy_gpu_hours: Option<f64>,
    pub tdp_watts: f64,
    pub grid_gco2_per_kwh: f64,
    #[serde(default = "d_pue")]
    pub pue: f64,
    #[serde(default)]
    pub layers: Option<u64>,
    #[serde(default)]
    pub hidden: Option<u64>,
    #[serde(default)]
    pub intermediate: Option<u64>,
    #[serde(default)]
    pub heads: Option<u64>,
    #[serde(default)]
    pub kv_heads: Option<u64>,
    /// Parameter count for the Chinchilla comparison (total, with
    /// embeddings). Falls back to the architecture's non-embedding count.
    #[serde(default)]
    pub chinchilla_params: Option<f64>,
}

impl BudgetParams {
    fn arch(&self) -> Result<Option<ModelArch>> {
        match (self.layers, self.hidden, self.intermediate, self.heads, self.kv_heads) {
            (Some(l), Some(h), Some(i), Some(n), kv) => Ok(Some(ModelArch::new(l, h, i, n, kv.unwrap_or(n)))),
            (None, None, None, None, None) => Ok(None),
            _ => Err(CliError::validation("architecture needs layers, hidden, intermediate and heads together")),
        }
    }

    pub fn report(&self) -> Result<BudgetReport> {
        let tps = mixplan::tokens_per_step(self.micro_batch, self.seq_len, self.grad_accum, self.devices)?;
        let budget = mixplan::training_budget(self.tokens_total, tps, self.mean_tflops, self.gpu_hours)?;
        let energy = mixplan::energy_carbon(
            self.energy_gpu_hours.unwrap_or(self.gpu_hours),
            self.tdp_watts,
            self.grid_gco2_per_kwh,
            self.pue,
        )?;
        let params = self.arch()?.map(|a| mixplan::param_count(&a)).transpose()?;
        let chinchilla = match self.chinchilla_params.or(params.map(|p| p as f64)) {
            Some(p) => Some(mixplan::chinchilla_check(p, self.tokens_total as f64)?),
            None => None,
        };
        Ok(BudgetReport {
            tokens_per_step: tps,
            total_steps: budget.total_steps,
            total_flops: budget.total_flops,
            energy_mwh: energy.energy_mwh,
            co2_tons: energy.co2_tons,
            co2_tons_with_pue: energy.co2_tons_with_pue,
            params,
            inference_flops_per_token: chinchilla.map(|c| c.inference_flops_per_token),
            chinchilla,
        })
    }
}

impl Stage for BudgetParams {
    fn inputs(&self) -> Vec<&Path> {
        Vec::new()
    }
    fn outputs(&self) -> Vec<&Path> {
        vec![&self.output]
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.output]
    }
    fn validate(&self) -> Result<()> {
        self.report().map(|_| ())
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let report = self.report()?;
        write_json(&self.output, &report)?;
        print!("{report}");
        Ok(serde_json::to_value(&report).expect("report serialization"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitScalingParams {
    /// Observations CSV with columns lang, params, weight, loss[, unit].
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default = "d_param_unit")]
    pub param_unit: f64,
    #[serde(default)]
    pub fixed_c: Option<f64>,
    #[serde(default = "d_max_iter")]
    pub max_iterations: usize,
    /// Trade-off curve between `other` and `varied` at `tradeoff_params`.
    #[serde(default)]
    pub tradeoff_output: Option<PathBuf>,
    #[serde(default)]
    pub varied: Option<String>,
    #[serde(default)]
    pub other: Option<String>,
    #[serde(default)]
    pub tradeoff_params: Option<f64>,
    #[serde(default = "d_grid_steps")]
    pub grid_steps: usize,
}

impl Stage for FitScalingParams {
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn outputs(&self) -> Vec<&Path> {
        let mut v = vec![self.output.as_path()];
        v.extend(opt_vec(&self.tradeoff_output));
        v
    }
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.input, &mut self.output];
        v.extend(self.tradeoff_output.as_mut());
        v
    }
    fn validate(&self) -> Result<()> {
        check(self.param_unit > 0.0 && self.param_unit.is_finite(), || "param_unit must be positive".into())?;
        check(self.max_iterations > 0, || "max_iterations must be positive".into())?;
        if self.tradeoff_output.is_some() {
            check(self.varied.is_some() && self.other.is_some() && self.tradeoff_params.is_some(), || {
                "tradeoff_output needs varied, other and tradeoff_params".into()
            })?;
        }
        Ok(())
    }
    fn execute(&self, _seed: u64) -> Result<Value> {
        let file = File::open(&self.input).map_err(|e| CliError::io(&self.input, e))?;
        let obs = scaling::read_observations_csv(BufReader::new(file))?;
        let options =
            FitOptions { param_unit: self.param_unit, fixed_c: self.fixed_c, max_iterations: self.max_iterations };
        let fits = scaling::fit_all(&obs, &options)?;
        let mut out = serde_json::to_value(&fits).expect("fit serialization");
        if let Some(path) = &self.tradeoff_output {
            let (varied, other) = (self.varied.as_deref().unwrap(), self.other.as_deref().unwrap());
            let n = self.tradeoff_params.unwrap();
            let rows = scaling::tradeoff_curve(
                fits.get(other)?,
                fits.get(varied)?,
                &scaling::weight_grid(self.grid_steps),
                n,
            )?;
            scaling::write_tradeoff_csv(create(path)?, other, varied, &rows)?;
            out["tradeoff"] = json!({ "varied": varied, "other": other, "params": n, "rows": rows });
        }
        write_json(&self.output, &out)?;
        let diagnostics: BTreeMap<&str, _> = fits.languages.iter().map(|(k, f)| (k.as_str(), &f.diagnostics)).collect();
        Ok(json!({ "languages": diagnostics }))
    }
}

// ---------------------------------------------------------------------------

/// A pipeline stage: its kind plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum StageConfig {
    Stats(StatsParams),
    Filter(FilterParams),
    PplFilter(PplFilterParams),
    DedupExact(DedupExactParams),
    DedupFuzzy(DedupFuzzyParams),
    CleanParallel(CleanParallelParams),
    TrainLm(TrainLmParams),
    TrainTokenizer(TrainTokenizerParams),
    Fertility(FertilityParams),
    PlanMix(PlanMixParams),
    Budget(BudgetParams),
    FitScaling(FitScalingParams),
}

macro_rules! each {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            StageConfig::Stats($s) => $body,
            StageConfig::Filter($s) => $body,
            StageConfig::PplFilter($s) => $body,
            StageConfig::DedupExact($s) => $body,
            StageConfig::DedupFuzzy($s) => $body,
            StageConfig::CleanParallel($s) => $body,
            StageConfig::TrainLm($s) => $body,
            StageConfig::TrainTokenizer($s) => $body,
            StageConfig::Fertility($s) => $body,
            StageConfig::PlanMix($s) => $body,
            StageConfig::Budget($s) => $body,
            StageConfig::FitScaling($s) => $body,
        }
    };
}

impl StageConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StageConfig::Stats(_) => "stats",
            StageConfig::Filter(_) => "filter",
            StageConfig::PplFilter(_) => "ppl-filter",
            StageConfig::DedupExact(_) => "dedup-exact",
            StageConfig::DedupFuzzy(_) => "dedup-fuzzy",
            StageConfig::CleanParallel(_) => "clean-parallel",
            StageConfig::TrainLm(_) => "train-lm",
            StageConfig::TrainTokenizer(_) => "train-tokenizer",
            StageConfig::Fertility(_) => "fertility",
            StageConfig::PlanMix(_) => "plan-mix",
            StageConfig::Budget(_) => "budget",
            StageConfig::FitScaling(_) => "fit-scaling",
        }
    }

    pub fn inputs(&self) -> Vec<&Path> {
        each!(self, s => s.inputs())
    }

    pub fn outputs(&self) -> Vec<&Path> {
        each!(self, s => s.outputs())
    }

    pub fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        each!(self, s => s.paths_mut())
    }

    pub fn validate(&self) -> Result<()> {
        each!(self, s => s.validate())
    }

    pub fn execute(&self, seed: u64) -> Result<Value> {
        each!(self, s => s.execute(seed))
    }

    /// Joins relative paths onto `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tags_cover_every_kind() {
        for kind in STAGE_KINDS {
            let err = serde_json::from_value::<StageConfig>(json!({ "stage": kind })).unwrap_err();
            assert!(err.to_string().contains("missing field"), "{kind}: {err}");
        }
        let err = serde_json::from_value::<StageConfig>(json!({ "stage": "tokenise" })).unwrap_err();
        assert!(err.to_string().contains("unknown variant"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = json!({ "stage": "dedup-exact", "input": "a", "output": "b", "treshold": 1 });
        assert!(serde_json::from_value::<StageConfig>(bad).is_err());
        let ok = json!({ "stage": "dedup-exact", "input": "a", "output": "b" });
        let stage: StageConfig = serde_json::from_value(ok).unwrap();
        assert_eq!(stage.kind(), "dedup-exact");
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut stage: StageConfig =
            serde_json::from_value(json!({ "stage": "train-lm", "input": "docs.jsonl", "output": "/abs/lm.txt" }))
                .unwrap();
        stage.resolve(Path::new("/base"));
        assert_eq!(stage.inputs(), [Path::new("/base/docs.jsonl")]);
        assert_eq!(stage.outputs(), [Path::new("/abs/lm.txt")]);
    }

    #[test]
    fn fuzzy_band_layout_is_validated() {
        let stage: StageConfig = serde_json::from_value(
            json!({ "stage": "dedup-fuzzy", "input": "a", "output": "b", "bands": 10, "rows": 4 }),
        )
        .unwrap();
        assert!(stage.validate().is_err());
    }

    #[test]
    fn partial_architecture_is_rejected() {
        let mut v = json!({
            "output": "b.json", "micro_batch": 8, "seq_len": 2048, "grad_accum": 4, "devices": 240,
            "tokens_total": 3_000_000_000_000u64, "mean_tflops": 120.0, "gpu_hours": 99648.0,
            "tdp_watts": 400.0, "grid_gco2_per_kwh": 57.0, "layers": 24
        });
        let p: BudgetParams = serde_json::from_value(v.clone()).unwrap();
        assert!(p.validate().is_err());
        for (k, x) in [("hidden", 2048), ("intermediate", 5504), ("heads", 16)] {
            v[k] = json!(x);
        }
        let p: BudgetParams = serde_json::from_value(v).unwrap();
        assert_eq!(p.report().unwrap().params, Some(1_214_251_008));
    }
}
