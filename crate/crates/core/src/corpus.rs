//! Document records, JSONL ingestion, text normalization and per-bucket
//! corpus statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::{is_nfc, UnicodeNormalization};

use crate::tokenizer::TokenizerModel;

/// Meta key that marks a record as already rejected; such records may carry empty text.
pub const REJECTED_META_KEY: &str = "rejected";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// One text record flowing through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub lang: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), lang: String::new(), source: String::new(), meta: BTreeMap::new() }
    }

    pub fn with_lang(mut self, lang: impl Into<String>) -> Self {
        self.lang = lang.into();
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn is_rejected(&self) -> bool {
        self.meta.get(REJECTED_META_KEY).is_some_and(|v| v == "true")
    }

    /// Checks the record-level invariants: non-empty id, and empty text only
    /// on rejected records.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.text.is_empty() && !self.is_rejected() {
            return Err(format!("document {:?} has empty text", self.id));
        }
        Ok(())
    }

    /// Canonical single-line JSON form, the inverse of ingestion.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("document serialization is infallible")
    }
}

/// Whitespace-delimited word count, the fallback token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// The first malformed line aborts ingestion.
    #[default]
    Strict,
    /// Malformed lines are counted and skipped.
    SkipBad,
}

/// Streaming JSONL reader yielding documents in file order.
///
/// In strict mode the first malformed line is yielded as an error and the
/// stream ends. In skip-bad mode malformed lines increment
/// [`JsonlReader::skipped`] and are dropped. Blank lines are ignored in both
/// modes.
pub struct JsonlReader<R> {
    lines: io::Lines<R>,
    strictness: Strictness,
    line_no: usize,
    skipped: usize,
    seen: HashSet<String>,
    done: bool,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, strictness: Strictness) -> Self {
        Self { lines: reader.lines(), strictness, line_no: 0, skipped: 0, seen: HashSet::new(), done: false }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn parse_line(&mut self, line: &str) -> Result<Document, CorpusError> {
        let doc: Document = serde_json::from_str(line)
            .map_err(|e| CorpusError::Malformed { line: self.line_no, message: e.to_string() })?;
        doc.validate().map_err(|message| CorpusError::Malformed { line: self.line_no, message })?;
        if !self.seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId { line: self.line_no, id: doc.id });
        }
        Ok(doc)
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(source) => {
                    self.done = true;
                    return Some(Err(CorpusError::Io { path: format!("<line {}>", self.line_no + 1), source }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match self.parse_line(&line) {
                Ok(doc) => return Some(Ok(doc)),
                Err(err) => match self.strictness {
                    Strictness::Strict => {
                        self.done = true;
                        return Some(Err(err));
                    }
                    Strictness::SkipBad => {
                        log::debug!("skipping record: {err}");
                        self.skipped += 1;
                    }
                },
            }
        }
        None
    }
}

/// Opens a JSONL document file for streaming.
pub fn ingest_jsonl(
    path: impl AsRef<Path>,
    strictness: Strictness,
) -> Result<JsonlReader<BufReader<File>>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    Ok(JsonlReader::new(BufReader::new(file), strictness))
}

/// Reads a whole JSONL file into memory, returning the documents and the
/// number of skipped lines.
pub fn read_jsonl(path: impl AsRef<Path>, strictness: Strictness) -> Result<(Vec<Document>, usize), CorpusError> {
    let mut reader = ingest_jsonl(path, strictness)?;
    let docs = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((docs, reader.skipped()))
}

pub fn write_jsonl<'a, W: Write>(mut out: W, docs: impl IntoIterator<Item = &'a Document>) -> io::Result<()> {
    for doc in docs {
        writeln!(out, "{}", doc.to_json_line())?;
    }
    out.flush()
}

/// Normalization flags. Application order is always NFC, then control-character
/// stripping, then whitespace collapsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizePolicy {
    pub nfc: bool,
    pub strip_control: bool,
    pub collapse_whitespace: bool,
}

impl NormalizePolicy {
    pub const ALL: Self = Self { nfc: true, strip_control: true, collapse_whitespace: true };
    pub const NONE: Self = Self { nfc: false, strip_control: false, collapse_whitespace: false };
}

impl Default for NormalizePolicy {
    fn default() -> Self {
        Self::ALL
    }
}

// Tab, LF and CR are treated as whitespace, not as control characters.
fn is_strippable_control(c: char) -> bool {
    c.is_control() && !matches!(c, '\t' | '\n' | '\r')
}

/// Applies `policy` to `text`. Idempotent for every input.
pub fn normalize_text(text: &str, policy: NormalizePolicy) -> String {
    let mut out = if policy.nfc && !is_nfc(text) { text.nfc().collect::<String>() } else { text.to_owned() };
    if policy.strip_control && out.chars().any(is_strippable_control) {
        out.retain(|c| !is_strippable_control(c));
        // Removing a control character can expose a base character to a
        // following combining mark.
        if policy.nfc && !is_nfc(&out) {
            out = out.nfc().collect();
        }
    }
    if policy.collapse_whitespace {
        let mut collapsed = String::with_capacity(out.len());
        for word in out.split_whitespace() {
            if !collapsed.is_empty() {
                collapsed.push(' ');
            }
            collapsed.push_str(word);
        }
        out = collapsed;
    }
    out
}

/// Byte, document and token totals for one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub bytes: u64,
    pub docs: u64,
    pub tokens: u64,
}

impl CorpusStats {
    pub fn new(bytes: u64, docs: u64, tokens: u64) -> Self {
        Self { bytes, docs, tokens }
    }

    /// Mean tokens per document, 0 for an empty bucket.
    pub fn tokens_per_doc(&self) -> f64 {
        if self.docs == 0 {
            0.0
        } else {
            self.tokens as f64 / self.docs as f64
        }
    }

    /// `tokens_per_doc` rounded to two decimals, as reported.
    pub fn tokens_per_doc_rounded(&self) -> f64 {
        round2(self.tokens_per_doc())
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        self.bytes += other.bytes;
        self.docs += other.docs;
        self.tokens += other.tokens;
    }
}

pub(crate) fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Bucket key: (lang, source).
pub type BucketKey = (String, String);

/// Per-bucket statistics. Merging is associative and commutative, so partial
/// aggregates computed on shards combine to the same result in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsReport {
    pub buckets: BTreeMap<BucketKey, CorpusStats>,
}

impl StatsReport {
    pub fn add(&mut self, doc: &Document, tokenizer: Option<&TokenizerModel>) {
        let tokens = match tokenizer {
            Some(model) => model.encode(doc.text.as_bytes()).len(),
            None => word_count(&doc.text),
        };
        let entry = self.buckets.entry((doc.lang.clone(), doc.source.clone())).or_default();
        entry.merge(&CorpusStats::new(doc.text.len() as u64, 1, tokens as u64));
    }

    pub fn merge(&mut self, other: &StatsReport) {
        for (key, stats) in &other.buckets {
            self.buckets.entry(key.clone()).or_default().merge(stats);
        }
    }

    pub fn totals(&self) -> CorpusStats {
        self.buckets.values().fold(CorpusStats::default(), |mut acc, s| {
            acc.merge(s);
            acc
        })
    }

    /// Writes the report as CSV, one row per bucket followed by a `*,*` totals row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["lang", "source", "bytes", "docs", "tokens", "tokens_per_doc"])?;
        let total = self.totals();
        let rows = self
            .buckets
            .iter()
            .map(|((lang, source), s)| (lang.as_str(), source.as_str(), s))
            .chain(std::iter::once(("*", "*", &total)));
        for (lang, source, s) in rows {
            writer.write_record([
                lang.to_string(),
                source.to_string(),
                s.bytes.to_string(),
                s.docs.to_string(),
                s.tokens.to_string(),
                format!("{:.2}", s.tokens_per_doc()),
            ])?;
        }
        writer.flush().map_err(|source| CorpusError::Io { path: "<csv>".into(), source })?;
        Ok(())
    }
}

/// Aggregates statistics per (lang, source) bucket. Tokens are counted with
/// `tokenizer` when given, otherwise as whitespace-delimited words.
pub fn corpus_stats<'a>(
    docs: impl IntoIterator<Item = &'a Document>,
    tokenizer: Option<&TokenizerModel>,
) -> StatsReport {
    let mut report = StatsReport::default();
    for doc in docs {
        report.add(doc, tokenizer);
    }
    report
}
