//! Byte-fallback BPE tokenizer: training, encoding, decoding and fertility.
//!
//! Vocabulary layout is fixed: the 256 byte tokens come first, then the
//! special tokens (`<unk>`, `<s>`, `</s>` and the word-boundary marker), then
//! one token per learned merge, then the reserved placeholder tokens.
//!
//! Input text is split into chunks before merging. Every space starts a new
//! chunk that begins with the boundary marker, and a marker is also prepended
//! to the first chunk of non-empty input. Other whitespace characters form
//! chunks of their own. Merges never cross chunk boundaries. Everything that
//! is not a marker is spelled in byte tokens, so any byte string is encodable
//! and decoding inverts encoding exactly.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

pub type TokenId = u32;

pub const BOUNDARY_MARKER: &str = "\u{2581}";
pub const SPECIAL_TOKENS: [&str; 4] = ["<unk>", "<s>", "</s>", BOUNDARY_MARKER];
pub const BYTE_TOKENS: usize = 256;
pub const MARKER_ID: TokenId = (BYTE_TOKENS + 3) as TokenId;
/// Size of the vocabulary before any merge is learned.
pub const BASE_VOCAB: usize = BYTE_TOKENS + SPECIAL_TOKENS.len();

pub const DEFAULT_VOCAB_SIZE: usize = 32_000;
pub const DEFAULT_PLACEHOLDERS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {0} is below the base vocabulary of {BASE_VOCAB}")]
    VocabTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {len}")]
    IdOutOfRange { id: TokenId, len: usize },
    #[error("corpus contains no words")]
    ZeroWords,
    #[error("comparison needs at least two models or two corpora")]
    NothingToCompare,
    #[error("invalid tokenizer model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Target vocabulary size, excluding placeholders.
    pub vocab_size: usize,
    pub placeholder_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: DEFAULT_VOCAB_SIZE, placeholder_count: DEFAULT_PLACEHOLDERS }
    }
}

/// A trained tokenizer. Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    config: TokenizerConfig,
    merges: Vec<(TokenId, TokenId)>,
    /// Decoded bytes of each non-placeholder token; the marker decodes to a space.
    pieces: Vec<Vec<u8>>,
    /// Bytes used for display and tie-breaking; the marker is spelled as U+2581.
    display: Vec<Vec<u8>>,
    ranks: HashMap<(TokenId, TokenId), u32>,
}

impl TokenizerModel {
    /// Pure byte tokenizer with no merges.
    pub fn byte_level(placeholder_count: usize) -> Self {
        Self::from_merges(TokenizerConfig { vocab_size: BASE_VOCAB, placeholder_count }, Vec::new())
            .expect("empty merge list is valid")
    }

    /// Rebuilds a model from its ordered merge list.
    pub fn from_merges(config: TokenizerConfig, merges: Vec<(TokenId, TokenId)>) -> Result<Self, TokenizerError> {
        let mut pieces = Vec::with_capacity(BASE_VOCAB + merges.len());
        let mut display = Vec::with_capacity(BASE_VOCAB + merges.len());
        for b in 0..=255u8 {
            pieces.push(vec![b]);
            display.push(vec![b]);
        }
        for special in SPECIAL_TOKENS {
            if special == BOUNDARY_MARKER {
                pieces.push(b" ".to_vec());
            } else {
                pieces.push(Vec::new());
            }
            display.push(special.as_bytes().to_vec());
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(left, right)) in merges.iter().enumerate() {
            let next = pieces.len();
            let valid = |id: TokenId| (id as usize) < next && !is_plain_special(id);
            if !valid(left) || !valid(right) {
                return Err(TokenizerError::InvalidModel(format!(
                    "merge {rank} refers to unusable ids ({left}, {right})"
                )));
            }
            if ranks.insert((left, right), rank as u32).is_some() {
                return Err(TokenizerError::InvalidModel(format!("merge {rank} repeats pair ({left}, {right})")));
            }
            let piece = [pieces[left as usize].as_slice(), &pieces[right as usize]].concat();
            let disp = [display[left as usize].as_slice(), &display[right as usize]].concat();
            pieces.push(piece);
            display.push(disp);
        }
        Ok(Self { config, merges, pieces, display, ranks })
    }

    pub fn config(&self) -> TokenizerConfig {
        self.config
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Total vocabulary size including placeholders.
    pub fn vocab_len(&self) -> usize {
        self.pieces.len() + self.config.placeholder_count
    }

    /// First placeholder id; placeholders fill the remaining slots.
    pub fn placeholder_start(&self) -> TokenId {
        self.pieces.len() as TokenId
    }

    /// Model after only the first `k` merges.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.merges.len());
        Self::from_merges(
            TokenizerConfig { vocab_size: BASE_VOCAB + k, placeholder_count: self.config.placeholder_count },
            self.merges[..k].to_vec(),
        )
        .expect("prefix of a valid merge list is valid")
    }

    /// Human-readable vocabulary, one string per id.
    pub fn vocab(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.vocab_len());
        for id in 0..self.pieces.len() {
            out.push(self.token_string(id as TokenId));
        }
        for i in 0..self.config.placeholder_count {
            out.push(format!("<placeholder_{i}>"));
        }
        out
    }

    pub fn token_string(&self, id: TokenId) -> String {
        let idx = id as usize;
        if idx < BYTE_TOKENS {
            return format!("<0x{idx:02X}>");
        }
        if idx >= self.pieces.len() {
            return format!("<placeholder_{}>", idx - self.pieces.len());
        }
        render_bytes(&self.display[idx])
    }

    /// True for tokens whose decoded form is only whitespace (a bare marker or
    /// a whitespace byte). Fertility does not count these.
    pub fn is_boundary_token(&self, id: TokenId) -> bool {
        self.pieces
            .get(id as usize)
            .and_then(|p| std::str::from_utf8(p).ok())
            .is_some_and(|s| !s.is_empty() && s.chars().all(char::is_whitespace))
    }

    /// Encodes arbitrary bytes. Never fails and never emits placeholders.
    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            out.extend(self.apply_merges(chunk));
        }
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    fn apply_merges(&self, mut symbols: Vec<TokenId>) -> Vec<TokenId> {
        loop {
            let best =
                symbols.windows(2).filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1])))).min();
            let Some((rank, pair)) = best else { break };
            let new_id = (BASE_VOCAB as u32) + rank;
            symbols = merge_pair(&symbols, pair, new_id);
        }
        symbols
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let idx = id as usize;
            if idx >= self.vocab_len() {
                return Err(TokenizerError::IdOutOfRange { id, len: self.vocab_len() });
            }
            if let Some(piece) = self.pieces.get(idx) {
                out.extend_from_slice(piece);
            }
        }
        // Drop the marker added in front of the first chunk.
        if out.first() == Some(&b' ') {
            out.remove(0);
        }
        Ok(out)
    }

    pub fn decode_string(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            config: self.config,
            boundary_marker: BOUNDARY_MARKER.to_string(),
            vocab: self.vocab(),
            merges: self.merges.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serialization is infallible");
        s.push('\n');
        s
    }

    /// Loads a model written by [`TokenizerModel::to_json`], checking that the
    /// stored vocabulary agrees with the one implied by the merges.
    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.boundary_marker != BOUNDARY_MARKER {
            return Err(TokenizerError::InvalidModel(format!(
                "unsupported boundary marker {:?}",
                file.boundary_marker
            )));
        }
        let model = Self::from_merges(file.config, file.merges)?;
        if model.vocab() != file.vocab {
            return Err(TokenizerError::InvalidModel("vocabulary does not match merge list".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: TokenizerConfig,
    boundary_marker: String,
    vocab: Vec<String>,
    merges: Vec<(TokenId, TokenId)>,
}

fn is_plain_special(id: TokenId) -> bool {
    (BYTE_TOKENS as TokenId..MARKER_ID).contains(&id)
}

fn render_bytes(bytes: &[u8]) -> String {
    let mut s = String::new();
    for chunk in bytes.utf8_chunks() {
        s.push_str(chunk.valid());
        for b in chunk.invalid() {
            let _ = write!(s, "<0x{b:02X}>");
        }
    }
    s
}

fn merge_pair(symbols: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Splits input into the initial symbol sequences that merges operate on.
pub fn pretokenize(text: &[u8]) -> Vec<Vec<TokenId>> {
    let mut chunks = Vec::new();
    if text.is_empty() {
        return chunks;
    }
    let mut current = vec![MARKER_ID];
    let push_bytes = |cur: &mut Vec<TokenId>, bytes: &[u8]| {
        cur.extend(bytes.iter().map(|&b| b as TokenId));
    };
    for chunk in text.utf8_chunks() {
        for c in chunk.valid().chars() {
            if c == ' ' {
                if !current.is_empty() {
                    chunks.push(std::mem::take(&mut current));
                }
                current.push(MARKER_ID);
            } else if c.is_whitespace() {
                if !current.is_empty() {
                    chunks.push(std::mem::take(&mut current));
                }
                let mut buf = [0u8; 4];
                chunks.push(c.encode_utf8(&mut buf).bytes().map(TokenId::from).collect());
            } else {
                let mut buf = [0u8; 4];
                push_bytes(&mut current, c.encode_utf8(&mut buf).as_bytes());
            }
        }
        push_bytes(&mut current, chunk.invalid());
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Chunk frequency table. Tables built on separate shards merge by addition.
#[derive(Debug, Clone, Default)]
pub struct ChunkCounts {
    counts: HashMap<Vec<TokenId>, u64>,
}

impl ChunkCounts {
    pub fn add_text(&mut self, text: &[u8]) {
        for chunk in pretokenize(text) {
            *self.counts.entry(chunk).or_insert(0) += 1;
        }
    }

    /// Adds a pre-split word `count` times, as it would appear after a space.
    pub fn add_word(&mut self, word: &str, count: u64) {
        let mut symbols = vec![MARKER_ID];
        symbols.extend(word.bytes().map(TokenId::from));
        *self.counts.entry(symbols).or_insert(0) += count;
    }

    pub fn merge(&mut self, other: ChunkCounts) {
        for (chunk, n) in other.counts {
            *self.counts.entry(chunk).or_insert(0) += n;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Learns merges from chunk counts.
/// Heap tie-break key: display bytes of both sides, then their ids.
type PairKey = (Vec<u8>, Vec<u8>, TokenId, TokenId);

pub fn train_from_counts(counts: &ChunkCounts, config: TokenizerConfig) -> Result<TokenizerModel, TokenizerError> {
    if config.vocab_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(config.vocab_size));
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let target_merges = config.vocab_size - BASE_VOCAB;

    let mut words: Vec<(Vec<TokenId>, u64)> = counts.counts.iter().map(|(w, &n)| (w.clone(), n)).collect();
    words.sort_unstable();

    let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut occurrences: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (idx, (symbols, n)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += n;
            occurrences.entry((w[0], w[1])).or_default().insert(idx);
        }
    }

    let base = TokenizerModel::byte_level(config.placeholder_count);
    let mut display: Vec<Vec<u8>> = base.display.clone();
    let mut merges = Vec::with_capacity(target_merges);

    // Display strings grow as merges are added, so heap entries carry owned
    // keys rebuilt from `display` at push time.
    let mut heap: BinaryHeap<(u64, Reverse<PairKey>)> = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<_>, display: &[Vec<u8>], pair: (TokenId, TokenId), count: u64| {
        let key = (display[pair.0 as usize].clone(), display[pair.1 as usize].clone(), pair.0, pair.1);
        heap.push((count, Reverse(key)));
    };
    for (&pair, &count) in &pair_counts {
        push(&mut heap, &display, pair, count);
    }

    while merges.len() < target_merges {
        let Some((count, Reverse((_, _, left, right)))) = heap.pop() else {
            break;
        };
        let pair = (left, right);
        if pair_counts.get(&pair).copied().unwrap_or(0) != count || count == 0 {
            continue;
        }
        let new_id = (BASE_VOCAB + merges.len()) as TokenId;
        merges.push(pair);
        let disp = [display[left as usize].as_slice(), &display[right as usize]].concat();
        display.push(disp);

        let affected: Vec<usize> = occurrences
            .remove(&pair)
            .map(|s| {
                let mut v: Vec<_> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        let mut changed: HashSet<(TokenId, TokenId)> = HashSet::new();
        for idx in affected {
            let (symbols, n) = &mut words[idx];
            if !symbols.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                let c = pair_counts.get_mut(&p).expect("pair counted");
                *c -= *n;
                changed.insert(p);
            }
            *symbols = merge_pair(symbols, pair, new_id);
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_insert(0) += *n;
                occurrences.entry(p).or_default().insert(idx);
                changed.insert(p);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
        let mut changed: Vec<_> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            if let Some(&c) = pair_counts.get(&p) {
                push(&mut heap, &display, p, c);
            }
        }
    }

    if merges.len() < target_merges {
        log::warn!(
            "corpus exhausted after {} merges; vocabulary is {} instead of {}",
            merges.len(),
            BASE_VOCAB + merges.len(),
            config.vocab_size
        );
    }
    TokenizerModel::from_merges(config, merges)
}

/// Trains a tokenizer on document texts.
pub fn train_bpe<'a>(
    docs: impl IntoIterator<Item = &'a Document>,
    config: TokenizerConfig,
) -> Result<TokenizerModel, TokenizerError> {
    let mut counts = ChunkCounts::default();
    for doc in docs {
        counts.add_text(doc.text.as_bytes());
    }
    train_from_counts(&counts, config)
}

/// Token and word totals for one (tokenizer, corpus) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilityCell {
    pub model: String,
    pub corpus: String,
    pub tokens: u64,
    pub words: u64,
    pub fertility: f64,
}

/// Token/word counts of `docs`. Words are maximal runs of non-whitespace;
/// tokens exclude bare boundary and whitespace tokens.
pub fn fertility<'a>(
    model: &TokenizerModel,
    docs: impl IntoIterator<Item = &'a Document>,
) -> Result<(u64, u64, f64), TokenizerError> {
    let mut tokens = 0u64;
    let mut words = 0u64;
    for doc in docs {
        words += doc.text.split_whitespace().count() as u64;
        tokens +=
            model.encode(doc.text.as_bytes()).into_iter().filter(|&id| !model.is_boundary_token(id)).count() as u64;
    }
    if words == 0 {
        return Err(TokenizerError::ZeroWords);
    }
    Ok((tokens, words, tokens as f64 / words as f64))
}

/// Relative efficiency of `model_a` against `model_b` on one corpus, in
/// percent: positive means `model_a` needs more tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeEfficiency {
    pub corpus: String,
    pub model_a: String,
    pub model_b: String,
    pub percent: f64,
}

pub fn relative_efficiency_percent(fertility_a: f64, fertility_b: f64) -> f64 {
    (fertility_a / fertility_b - 1.0) * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilityMatrix {
    pub cells: Vec<FertilityCell>,
    pub relative: Vec<RelativeEfficiency>,
}

impl FertilityMatrix {
    pub fn cell(&self, model: &str, corpus: &str) -> Option<&FertilityCell> {
        self.cells.iter().find(|c| c.model == model && c.corpus == corpus)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TokenizerError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "corpus", "tokens", "words", "fertility"])?;
        for c in &self.cells {
            w.write_record([
                c.model.clone(),
                c.corpus.clone(),
                c.tokens.to_string(),
                c.words.to_string(),
                format!("{:.6}", c.fertility),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_relative_csv<W: Write>(&self, out: W) -> Result<(), TokenizerError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["corpus", "model_a", "model_b", "percent"])?;
        for r in &self.relative {
            w.write_record([r.corpus.clone(), r.model_a.clone(), r.model_b.clone(), format!("{:.3}", r.percent)])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Fertility of every model on every corpus, plus pairwise relative efficiency
/// per corpus.
pub fn compare_fertility(
    models: &[(&str, &TokenizerModel)],
    corpora: &[(&str, &[Document])],
) -> Result<FertilityMatrix, TokenizerError> {
    if models.len() < 2 && corpora.len() < 2 {
        return Err(TokenizerError::NothingToCompare);
    }
    let mut cells = Vec::with_capacity(models.len() * corpora.len());
    for (model_name, model) in models {
        for (corpus_name, docs) in corpora {
            let (tokens, words, fert) = fertility(model, docs.iter())?;
            cells.push(FertilityCell {
                model: model_name.to_string(),
                corpus: corpus_name.to_string(),
                tokens,
                words,
                fertility: fert,
            });
        }
    }
    let mut relative = Vec::new();
    for (corpus_name, _) in corpora {
        for (a, _) in models {
            for (b, _) in models {
                if a == b {
                    continue;
                }
                let fa = cells.iter().find(|c| c.model == *a && c.corpus == *corpus_name);
                let fb = cells.iter().find(|c| c.model == *b && c.corpus == *corpus_name);
                if let (Some(fa), Some(fb)) = (fa, fb) {
                    relative.push(RelativeEfficiency {
                        corpus: corpus_name.to_string(),
                        model_a: a.to_string(),
                        model_b: b.to_string(),
                        percent: relative_efficiency_percent(fa.fertility, fb.fertility),
                    });
                }
            }
        }
    }
    Ok(FertilityMatrix { cells, relative })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_counts() -> ChunkCounts {
        let mut counts = ChunkCounts::default();
        for (word, n) in [("hug", 10), ("pug", 5), ("pun", 12), ("bun", 4), ("hugs", 5)] {
            counts.add_word(word, n);
        }
        counts
    }

    fn cfg(merges: usize) -> TokenizerConfig {
        TokenizerConfig { vocab_size: BASE_VOCAB + merges, placeholder_count: DEFAULT_PLACEHOLDERS }
    }

    #[test]
    fn byte_fallback_for_invalid_utf8() {
        let model = TokenizerModel::byte_level(0);
        let ids = model.encode(&[0xFF]);
        assert_eq!(ids, vec![MARKER_ID, 0xFF]);
        let content: Vec<_> = ids.iter().filter(|&&i| !model.is_boundary_token(i)).collect();
        assert_eq!(content, vec![&0xFF]);
        assert_eq!(model.decode(&ids).unwrap(), vec![0xFF]);
    }

    #[test]
    fn empty_round_trip() {
        let model = TokenizerModel::byte_level(0);
        assert!(model.encode(b"").is_empty());
        assert_eq!(model.decode(&[]).unwrap(), b"");
    }

    #[test]
    fn whitespace_variants_round_trip() {
        let model = train_from_counts(&fixture_counts(), cfg(20)).unwrap();
        for text in [" a", "a ", "  a  b", "\n", "a\tb\r\nc", "x\u{3000}y", "\u{2581}hug", "Déjà vu – œuf"] {
            let ids = model.encode_str(text);
            assert_eq!(model.decode(&ids).unwrap(), text.as_bytes(), "{text:?}");
        }
    }

    #[test]
    fn first_merge_is_u_g() {
        let model = train_from_counts(&fixture_counts(), cfg(1)).unwrap();
        assert_eq!(model.merges(), &[(b'u' as TokenId, b'g' as TokenId)]);
        assert_eq!(model.token_string(BASE_VOCAB as TokenId), "ug");
    }

    #[test]
    fn zero_merges_at_base_vocab() {
        let model = train_from_counts(&fixture_counts(), cfg(0)).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_len(), BASE_VOCAB + DEFAULT_PLACEHOLDERS);
    }

    #[test]
    fn rejects_vocab_below_base() {
        assert!(matches!(
            train_from_counts(&fixture_counts(), cfg(0).with_size(BASE_VOCAB - 1)),
            Err(TokenizerError::VocabTooSmall(_))
        ));
    }

    impl TokenizerConfig {
        fn with_size(mut self, n: usize) -> Self {
            self.vocab_size = n;
            self
        }
    }

    #[test]
    fn exhausted_corpus_returns_smaller_vocab() {
        let model = train_from_counts(&fixture_counts(), cfg(1000)).unwrap();
        assert!(model.merges().len() < 1000);
        // Every fixture word is a single token now.
        for w in ["hug", "pug", "pun", "bun", "hugs"] {
            assert_eq!(model.encode_str(w).len(), 1, "{w}");
        }
    }

    #[test]
    fn placeholders_fill_final_slots_and_decode_empty() {
        let model = train_from_counts(&fixture_counts(), cfg(3)).unwrap();
        let vocab = model.vocab();
        assert_eq!(vocab.len(), BASE_VOCAB + 3 + DEFAULT_PLACEHOLDERS);
        assert_eq!(vocab[model.placeholder_start() as usize], "<placeholder_0>");
        assert_eq!(vocab.last().unwrap(), "<placeholder_99>");
        let last = (model.vocab_len() - 1) as TokenId;
        assert_eq!(model.decode(&[last]).unwrap(), b"");
        assert!(matches!(model.decode(&[model.vocab_len() as TokenId]), Err(TokenizerError::IdOutOfRange { .. })));
    }

    #[test]
    fn json_round_trip_and_tamper_detection() {
        let model = train_from_counts(&fixture_counts(), cfg(6)).unwrap();
        let json = model.to_json();
        let back = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json(), json);
        let tampered = json.replacen("\"ug\"", "\"gu\"", 1);
        assert!(TokenizerModel::from_json(&tampered).is_err());
    }

    #[test]
    fn fertility_arithmetic_and_errors() {
        assert!((relative_efficiency_percent(2.0, 1.7) - 17.647).abs() < 1e-3);
        let model = TokenizerModel::byte_level(0);
        let empty = [Document::new("e", " ")];
        assert!(matches!(fertility(&model, empty.iter()), Err(TokenizerError::ZeroWords)));
    }

    #[test]
    fn compare_needs_two_of_something() {
        let model = TokenizerModel::byte_level(0);
        let docs = [Document::new("a", "x")];
        assert!(matches!(compare_fertility(&[("m", &model)], &[("c", &docs)]), Err(TokenizerError::NothingToCompare)));
    }
}
