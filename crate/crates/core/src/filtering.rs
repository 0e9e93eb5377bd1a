//! Document quality filters and the parallel sentence-pair cleaning pipeline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use xxhash_rust::xxh3::{xxh3_128, xxh3_64};

use crate::corpus::Document;
use crate::dedup::{DedupError, LshIndex, MinHasher};
use crate::ngram_lm::{NGramError, NGramModel};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid rule config: {0}")]
    InvalidConfig(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("pair {0} reached the quality stage without a quality score")]
    MissingQuality(usize),
    #[error("pairs line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    NGram(#[from] NGramError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub verdict: Verdict,
    /// Identifier of the failing rule; empty when kept.
    pub reason: String,
    pub metrics: BTreeMap<String, f64>,
}

impl FilterDecision {
    pub fn is_keep(&self) -> bool {
        self.verdict == Verdict::Keep
    }
}

/// One line of a filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub id: String,
    #[serde(flatten)]
    pub decision: FilterDecision,
}

/// A heuristic rule. Bounds left out are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    CharLength {
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    AlphaRatio {
        min: f64,
    },
    DigitRatio {
        max: f64,
    },
    Repetition {
        max: f64,
    },
    MeanWordLength {
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::CharLength { .. } => "char_length",
            Rule::AlphaRatio { .. } => "alpha_ratio",
            Rule::DigitRatio { .. } => "digit_ratio",
            Rule::Repetition { .. } => "repetition",
            Rule::MeanWordLength { .. } => "mean_word_length",
        }
    }

    fn validate(&self) -> Result<(), String> {
        let unit = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(format!("{what} must lie in [0, 1], got {x}"))
            }
        };
        match *self {
            Rule::CharLength { min: Some(lo), max: Some(hi) } if lo > hi => {
                Err(format!("char_length min {lo} > max {hi}"))
            }
            Rule::AlphaRatio { min } => unit(min, "alpha_ratio min"),
            Rule::DigitRatio { max } => unit(max, "digit_ratio max"),
            Rule::Repetition { max } => unit(max, "repetition max"),
            Rule::MeanWordLength { min, max } => {
                for v in [min, max].into_iter().flatten() {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(format!("mean_word_length bound {v} is invalid"));
                    }
                }
                match (min, max) {
                    (Some(lo), Some(hi)) if lo > hi => Err(format!("mean_word_length min {lo} > max {hi}")),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// Metric value and pass/fail for this rule.
    fn evaluate(&self, stats: &TextStats) -> (f64, bool) {
        match *self {
            Rule::CharLength { min, max } => {
                let n = stats.chars;
                let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
                (n as f64, ok)
            }
            Rule::AlphaRatio { min } => (stats.alpha_ratio(), stats.alpha_ratio() >= min),
            Rule::DigitRatio { max } => (stats.digit_ratio(), stats.digit_ratio() <= max),
            Rule::Repetition { max } => (stats.repetition, stats.repetition <= max),
            Rule::MeanWordLength { min, max } => {
                let m = stats.mean_word_length;
                (m, min.is_none_or(|lo| m >= lo) && max.is_none_or(|hi| m <= hi))
            }
        }
    }
}

/// Ordered rule list. Rules are evaluated in declaration order and the first
/// failure names the rejection reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub rules: Vec<Rule>,
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let mut names = HashSet::new();
        for rule in &self.rules {
            rule.validate().map_err(FilterError::InvalidConfig)?;
            if !names.insert(rule.name()) {
                return Err(FilterError::InvalidConfig(format!("rule {} declared twice", rule.name())));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FilterError> {
        let config: RuleConfig = serde_json::from_str(text).map_err(|e| FilterError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextStats {
    pub chars: usize,
    pub non_space_chars: usize,
    pub alpha: usize,
    pub digits: usize,
    pub words: usize,
    pub mean_word_length: f64,
    /// Share of word 3-gram slots taken by the most frequent 3-gram.
    pub repetition: f64,
}

impl TextStats {
    pub fn compute(text: &str) -> Self {
        let mut stats = TextStats::default();
        for c in text.chars() {
            stats.chars += 1;
            if !c.is_whitespace() {
                stats.non_space_chars += 1;
            }
            if c.is_alphabetic() {
                stats.alpha += 1;
            }
            if c.is_numeric() {
                stats.digits += 1;
            }
        }
        let words: Vec<&str> = text.split_whitespace().collect();
        stats.words = words.len();
        if !words.is_empty() {
            let total: usize = words.iter().map(|w| w.chars().count()).sum();
            stats.mean_word_length = total as f64 / words.len() as f64;
        }
        stats.repetition = top_trigram_fraction(&words);
        stats
    }

    /// Alphabetic characters over non-whitespace characters.
    pub fn alpha_ratio(&self) -> f64 {
        ratio(self.alpha, self.non_space_chars)
    }

    /// Numeric characters over non-whitespace characters.
    pub fn digit_ratio(&self) -> f64 {
        ratio(self.digits, self.non_space_chars)
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn top_trigram_fraction(words: &[&str]) -> f64 {
    if words.len() < 3 {
        return 0.0;
    }
    let mut counts: HashMap<&[&str], usize> = HashMap::new();
    for w in words.windows(3) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    top as f64 / (words.len() - 2) as f64
}

/// Evaluates every rule, reporting all metrics; the first failing rule in
/// declaration order decides the reason.
pub fn heuristic_filter(doc: &Document, rules: &RuleConfig) -> Result<FilterDecision, FilterError> {
    rules.validate()?;
    Ok(apply_rules(doc, rules))
}

/// [`heuristic_filter`] without re-validating the config.
pub fn apply_rules(doc: &Document, rules: &RuleConfig) -> FilterDecision {
    let stats = TextStats::compute(&doc.text);
    let mut metrics = BTreeMap::new();
    let mut reason = None;
    for rule in &rules.rules {
        let (value, ok) = rule.evaluate(&stats);
        metrics.insert(rule.name().to_string(), value);
        if !ok && reason.is_none() {
            reason = Some(rule.name());
        }
    }
    match reason {
        None => FilterDecision { verdict: Verdict::Keep, reason: String::new(), metrics },
        Some(r) => FilterDecision { verdict: Verdict::Reject, reason: r.to_string(), metrics },
    }
}

pub const REJECT_LOW_PPL: &str = "reject_low_ppl";
pub const REJECT_HIGH_PPL: &str = "reject_high_ppl";

pub fn validate_band(low: f64, high: f64) -> Result<(), FilterError> {
    if !(low >= 1.0 && low < high) {
        return Err(FilterError::InvalidConfig(format!("perplexity band needs 1 <= low < high, got [{low}, {high}]")));
    }
    Ok(())
}

/// Keep/reject decision for an already computed perplexity.
pub fn band_decision(ppl: f64, low: f64, high: f64) -> Result<FilterDecision, FilterError> {
    validate_band(low, high)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("ppl".to_string(), ppl);
    let (verdict, reason) = if ppl < low {
        (Verdict::Reject, REJECT_LOW_PPL)
    } else if ppl > high {
        (Verdict::Reject, REJECT_HIGH_PPL)
    } else {
        (Verdict::Keep, "")
    };
    Ok(FilterDecision { verdict, reason: reason.to_string(), metrics })
}

/// Keeps documents whose perplexity lies in `[low, high]`.
pub fn perplexity_band_filter(
    doc: &Document,
    model: &NGramModel,
    low: f64,
    high: f64,
) -> Result<FilterDecision, FilterError> {
    validate_band(low, high)?;
    if doc.text.split_whitespace().next().is_none() {
        return Err(FilterError::EmptyText(doc.id.clone()));
    }
    let ppl = model.text_perplexity(&doc.text)?;
    band_decision(ppl, low, high)
}

/// Per-reason tallies for a filtering pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTally {
    pub input: usize,
    pub kept: usize,
    pub rejected: BTreeMap<String, usize>,
}

impl FilterTally {
    pub fn record(&mut self, decision: &FilterDecision) {
        self.input += 1;
        if decision.is_keep() {
            self.kept += 1;
        } else {
            *self.rejected.entry(decision.reason.clone()).or_insert(0) += 1;
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.kept + self.rejected.values().sum::<usize>() == self.input
    }
}

// ---------------------------------------------------------------------------
// Parallel sentence pairs.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    pub tgt: String,
    pub src_lang: String,
    pub tgt_lang: String,
    /// Externally computed quality score in [0, 1].
    pub quality: Option<f64>,
}

impl SentencePair {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
            src_lang: String::new(),
            tgt_lang: String::new(),
            quality: None,
        }
    }

    pub fn with_quality(mut self, q: f64) -> Self {
        self.quality = Some(q);
        self
    }
}

/// Reads `src<TAB>tgt<TAB>src_lang<TAB>tgt_lang<TAB>quality` rows. An empty
/// quality field means no score.
pub fn read_pairs_tsv<R: BufRead>(reader: R) -> Result<Vec<SentencePair>, FilterError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| FilterError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let quality = match fields[4] {
            "" => None,
            q => {
                let q: f64 = q.parse().map_err(|_| err(format!("bad quality {q:?}")))?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(err(format!("quality {q} outside [0, 1]")));
                }
                Some(q)
            }
        };
        out.push(SentencePair {
            src: fields[0].to_string(),
            tgt: fields[1].to_string(),
            src_lang: fields[2].to_string(),
            tgt_lang: fields[3].to_string(),
            quality,
        });
    }
    Ok(out)
}

pub fn write_pairs_tsv<'a, W: Write>(mut out: W, pairs: impl IntoIterator<Item = &'a SentencePair>) -> io::Result<()> {
    for p in pairs {
        let q = p.quality.map(|q| q.to_string()).unwrap_or_default();
        writeln!(out, "{}\t{}\t{}\t{}\t{}", p.src, p.tgt, p.src_lang, p.tgt_lang, q)?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzyPairDedup {
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub shingle_k: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FuzzyPairDedup {
    fn default() -> Self {
        Self { num_perm: 128, bands: 32, rows: 4, shingle_k: 3, threshold: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplBand {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelCleanConfig {
    /// Near-duplicate removal on top of exact matching; `None` keeps exact only.
    pub fuzzy: Option<FuzzyPairDedup>,
    pub length_ratio_min: f64,
    pub length_ratio_max: f64,
    pub min_chars: usize,
    pub max_chars: usize,
    pub quality_threshold: f64,
    pub src_ppl_band: Option<PplBand>,
    pub tgt_ppl_band: Option<PplBand>,
}

impl Default for ParallelCleanConfig {
    fn default() -> Self {
        Self {
            fuzzy: Some(FuzzyPairDedup::default()),
            length_ratio_min: 0.5,
            length_ratio_max: 2.0,
            min_chars: 1,
            max_chars: 1024,
            quality_threshold: 0.8,
            src_ppl_band: None,
            tgt_ppl_band: None,
        }
    }
}

impl ParallelCleanConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: String| Err(FilterError::InvalidConfig(m));
        if !(self.length_ratio_min > 0.0 && self.length_ratio_min <= self.length_ratio_max) {
            return bad(format!("length ratio band [{}, {}] is invalid", self.length_ratio_min, self.length_ratio_max));
        }
        if self.min_chars > self.max_chars {
            return bad(format!("min_chars {} > max_chars {}", self.min_chars, self.max_chars));
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return bad(format!("quality threshold {} outside [0, 1]", self.quality_threshold));
        }
        for band in [self.src_ppl_band, self.tgt_ppl_band].into_iter().flatten() {
            validate_band(band.low, band.high)?;
        }
        if let Some(f) = self.fuzzy {
            if f.bands * f.rows != f.num_perm {
                return Err(DedupError::BandMismatch { bands: f.bands, rows: f.rows, num_perm: f.num_perm }.into());
            }
            if !(0.0..=1.0).contains(&f.threshold) {
                return bad(format!("fuzzy threshold {} outside [0, 1]", f.threshold));
            }
        }
        Ok(())
    }
}

/// Language models for the optional stage-2 perplexity bands.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairModels<'a> {
    pub src: Option<&'a NGramModel>,
    pub tgt: Option<&'a NGramModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dedup,
    Heuristic,
    Quality,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub input: usize,
    pub removed: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl StageReport {
    fn remove(&mut self, reason: &str) {
        self.removed += 1;
        *self.reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub dedup: StageReport,
    pub heuristic: StageReport,
    pub quality: StageReport,
}

/// Normalization used for pair duplicate detection: NFC, lowercase, letters
/// and digits only, single spaces.
pub fn pair_fingerprint_text(s: &str) -> String {
    let lowered: String = s.nfc().flat_map(char::to_lowercase).collect();
    let kept: String = lowered.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stage 1: exact and near-duplicate removal. Behaves as if pairs were seen
/// one at a time in input order, keeping the first of each group.
pub struct PairDeduplicator {
    exact: HashSet<u128>,
    fuzzy: Option<(MinHasher, LshIndex)>,
}

impl PairDeduplicator {
    pub fn new(fuzzy: Option<FuzzyPairDedup>) -> Result<Self, FilterError> {
        let fuzzy = match fuzzy {
            Some(f) => Some((
                MinHasher::new(f.num_perm, f.shingle_k, f.seed),
                LshIndex::new(f.num_perm, f.bands, f.rows, f.threshold)?,
            )),
            None => None,
        };
        Ok(Self { exact: HashSet::new(), fuzzy })
    }

    /// Returns the removal reason, or `None` when the pair is new.
    pub fn check(&mut self, pair: &SentencePair) -> Result<Option<&'static str>, FilterError> {
        let src = pair_fingerprint_text(&pair.src);
        let tgt = pair_fingerprint_text(&pair.tgt);
        let key = xxh3_128(format!("{src}\t{tgt}").as_bytes());
        if !self.exact.insert(key) {
            return Ok(Some("duplicate"));
        }
        if let Some((hasher, index)) = &mut self.fuzzy {
            // Shingles from each side are tagged so src and tgt never collide.
            let hashes = crate::dedup::word_shingles(&src, hasher.shingle_k())
                .into_iter()
                .map(|s| xxh3_64(format!("s\u{1}{s}").as_bytes()))
                .chain(
                    crate::dedup::word_shingles(&tgt, hasher.shingle_k())
                        .into_iter()
                        .map(|s| xxh3_64(format!("t\u{1}{s}").as_bytes())),
                );
            if let Some(sig) = hasher.sign_hashes(hashes) {
                if index.check_and_insert(sig)?.is_some() {
                    return Ok(Some("near_duplicate"));
                }
            }
        }
        Ok(None)
    }
}

/// Stage 2: pair heuristics. Returns the first failing check.
pub fn pair_heuristics(
    pair: &SentencePair,
    config: &ParallelCleanConfig,
    models: PairModels<'_>,
) -> Result<Option<&'static str>, FilterError> {
    let src_len = pair.src.chars().count();
    let tgt_len = pair.tgt.chars().count();
    if pair_fingerprint_text(&pair.src) == pair_fingerprint_text(&pair.tgt) {
        return Ok(Some("identical"));
    }
    if src_len == 0 || tgt_len == 0 {
        return Ok(Some("empty_side"));
    }
    let ratio = src_len as f64 / tgt_len as f64;
    if ratio < config.length_ratio_min || ratio > config.length_ratio_max {
        return Ok(Some("length_ratio"));
    }
    let in_len = |n: usize| n >= config.min_chars && n <= config.max_chars;
    if !in_len(src_len) {
        return Ok(Some("src_length"));
    }
    if !in_len(tgt_len) {
        return Ok(Some("tgt_length"));
    }
    let sides = [
        (config.src_ppl_band, models.src, &pair.src, "src_ppl"),
        (config.tgt_ppl_band, models.tgt, &pair.tgt, "tgt_ppl"),
    ];
    for (band, model, text, reason) in sides {
        if let (Some(band), Some(model)) = (band, model) {
            let ppl = model.text_perplexity(text)?;
            if ppl < band.low || ppl > band.high {
                return Ok(Some(reason));
            }
        }
    }
    Ok(None)
}

/// Stage 3: quality threshold.
pub fn pair_quality(pair: &SentencePair, index: usize, threshold: f64) -> Result<Option<&'static str>, FilterError> {
    match pair.quality {
        None => Err(FilterError::MissingQuality(index)),
        Some(q) if q >= threshold => Ok(None),
        Some(_) => Ok(Some("low_quality")),
    }
}

/// Streaming three-stage cleaner. Pairs pass dedup, then heuristics, then the
/// quality threshold; output order follows input order.
pub struct ParallelCleaner<'a> {
    config: ParallelCleanConfig,
    models: PairModels<'a>,
    dedup: PairDeduplicator,
    report: CleanReport,
}

impl<'a> ParallelCleaner<'a> {
    pub fn new(config: ParallelCleanConfig, models: PairModels<'a>) -> Result<Self, FilterError> {
        config.validate()?;
        if (config.src_ppl_band.is_some() && models.src.is_none())
            || (config.tgt_ppl_band.is_some() && models.tgt.is_none())
        {
            return Err(FilterError::InvalidConfig("a perplexity band is set without its language model".into()));
        }
        Ok(Self { dedup: PairDeduplicator::new(config.fuzzy)?, config, models, report: CleanReport::default() })
    }

    /// Runs one pair through all stages. `Ok(None)` means kept.
    pub fn process(&mut self, pair: &SentencePair) -> Result<Option<(Stage, &'static str)>, FilterError> {
        let index = self.report.input;
        self.report.input += 1;
        self.report.dedup.input += 1;
        if let Some(reason) = self.dedup.check(pair)? {
            self.report.dedup.remove(reason);
            return Ok(Some((Stage::Dedup, reason)));
        }
        self.report.heuristic.input += 1;
        if let Some(reason) = pair_heuristics(pair, &self.config, self.models)? {
            self.report.heuristic.remove(reason);
            return Ok(Some((Stage::Heuristic, reason)));
        }
        self.report.quality.input += 1;
        if let Some(reason) = pair_quality(pair, index, self.config.quality_threshold)? {
            self.report.quality.remove(reason);
            return Ok(Some((Stage::Quality, reason)));
        }
        self.report.kept += 1;
        Ok(None)
    }

    pub fn report(&self) -> &CleanReport {
        &self.report
    }

    pub fn into_report(self) -> CleanReport {
        self.report
    }
}

/// Cleans a pair stream, returning kept pairs in input order and the
/// per-stage report.
pub fn clean_parallel(
    pairs: impl IntoIterator<Item = SentencePair>,
    config: &ParallelCleanConfig,
    models: PairModels<'_>,
) -> Result<(Vec<SentencePair>, CleanReport), FilterError> {
    let mut cleaner = ParallelCleaner::new(config.clone(), models)?;
    let mut kept = Vec::new();
    for pair in pairs {
        if cleaner.process(&pair)?.is_none() {
            kept.push(pair);
        }
    }
    Ok((kept, cleaner.into_report()))
}
