//! Interpolated Kneser-Ney n-gram language model for perplexity filtering.
//!
//! Text is split on unicode whitespace and each document is one sequence
//! wrapped in `<s>` ... `</s>`. The highest order uses raw counts; every
//! lower order uses continuation counts (number of distinct left
//! extensions), except n-grams that start with `<s>`, which keep raw counts
//! because they cannot be extended to the left. The unigram level is always
//! the continuation distribution, whatever the model order, so an order-1
//! model and a higher-order model queried without context agree.
//!
//! The trained model is stored in backoff form: each seen n-gram carries its
//! interpolated probability and each seen context carries the weight given to
//! the lower order. Queries walk from the longest matching n-gram down, which
//! reproduces the interpolated distribution exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

const UNK_ID: u32 = 0;
const BOS_ID: u32 = 1;
const EOS_ID: u32 = 2;

/// Log10 probability stored for `<s>`, which is never predicted.
const BOS_LOG10: f64 = -99.0;
const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Debug, Error)]
pub enum NGramError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("discount must lie strictly inside (0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("text has no tokens")]
    EmptyText,
    #[error("model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscountPolicy {
    /// Per order, `n1 / (n1 + 2 n2)` from count-of-count statistics, falling
    /// back to 0.75 when either statistic is zero.
    #[default]
    Estimate,
    /// One discount for every order.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    /// Words seen fewer times than this are mapped to `<unk>`.
    pub min_count: u64,
    pub discount: DiscountPolicy,
    /// Interpolate the unigram level with the uniform distribution over the
    /// vocabulary. Without it, tokens never seen in training (including
    /// `<unk>` when nothing was mapped to it) have probability zero.
    pub unigram_floor: bool,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self { order: 5, min_count: 1, discount: DiscountPolicy::Estimate, unigram_floor: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: f64,
}

/// Raw n-gram counts up to a fixed order. Tables built on separate shards
/// merge by addition.
#[derive(Debug, Clone, Default)]
pub struct NGramCounts {
    max_order: usize,
    words: HashMap<String, u32>,
    names: Vec<String>,
    word_counts: Vec<u64>,
    sequences: u64,
    tables: Vec<HashMap<Vec<u32>, u64>>,
}

impl NGramCounts {
    pub fn new(order: usize) -> Self {
        let max_order = order.max(2);
        let mut counts = Self { max_order, tables: vec![HashMap::new(); max_order], ..Self::default() };
        for special in [UNK, BOS, EOS] {
            counts.intern(special);
        }
        counts
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.words.get(word) {
            return id;
        }
        let id = self.names.len() as u32;
        self.words.insert(word.to_string(), id);
        self.names.push(word.to_string());
        self.word_counts.push(0);
        id
    }

    pub fn add_text(&mut self, text: &str) {
        let mut seq = vec![BOS_ID];
        for word in text.split_whitespace() {
            let id = self.intern(word);
            self.word_counts[id as usize] += 1;
            seq.push(id);
        }
        if seq.len() == 1 {
            return;
        }
        seq.push(EOS_ID);
        self.sequences += 1;
        for end in 1..seq.len() {
            for len in 1..=self.max_order.min(end + 1) {
                let gram = &seq[end + 1 - len..=end];
                *self.tables[len - 1].entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &NGramCounts) {
        assert_eq!(self.max_order, other.max_order, "merging counts of different order");
        let remap: Vec<u32> = other.names.iter().map(|w| self.intern(w)).collect();
        for (id, &n) in other.word_counts.iter().enumerate() {
            self.word_counts[remap[id] as usize] += n;
        }
        self.sequences += other.sequences;
        for (k, table) in other.tables.iter().enumerate() {
            for (gram, &n) in table {
                let key: Vec<u32> = gram.iter().map(|&t| remap[t as usize]).collect();
                *self.tables[k].entry(key).or_insert(0) += n;
            }
        }
    }
}

/// A trained, immutable n-gram model.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    discounts: Vec<f64>,
    unigram_floor: bool,
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

fn discount_from_counts<'a>(counts: impl Iterator<Item = &'a u64>) -> f64 {
    let (mut n1, mut n2) = (0u64, 0u64);
    for &c in counts {
        match c {
            1 => n1 += 1,
            2 => n2 += 1,
            _ => {}
        }
    }
    if n1 == 0 || n2 == 0 {
        FALLBACK_DISCOUNT
    } else {
        n1 as f64 / (n1 as f64 + 2.0 * n2 as f64)
    }
}

fn log10_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Trains an interpolated Kneser-Ney model. Deterministic for a fixed input.
pub fn train_ngram<'a>(
    docs: impl IntoIterator<Item = &'a Document>,
    config: NGramConfig,
) -> Result<NGramModel, NGramError> {
    if config.order < 1 {
        return Err(NGramError::InvalidOrder(config.order));
    }
    let mut counts = NGramCounts::new(config.order);
    for doc in docs {
        counts.add_text(&doc.text);
    }
    NGramModel::from_counts(&counts, config)
}

impl NGramModel {
    pub fn from_counts(counts: &NGramCounts, config: NGramConfig) -> Result<Self, NGramError> {
        let order = config.order;
        if order < 1 {
            return Err(NGramError::InvalidOrder(order));
        }
        if counts.max_order < order.max(2) {
            return Err(NGramError::InvalidOrder(order));
        }
        if let DiscountPolicy::Fixed(d) = config.discount {
            if !(d > 0.0 && d < 1.0) {
                return Err(NGramError::InvalidDiscount(d));
            }
        }
        if counts.sequences == 0 {
            return Err(NGramError::EmptyCorpus);
        }

        // Final vocabulary: specials, then kept words in sorted order.
        let mut kept: Vec<&str> = counts
            .names
            .iter()
            .zip(&counts.word_counts)
            .skip(3)
            .filter(|(_, &n)| n >= config.min_count)
            .map(|(w, _)| w.as_str())
            .collect();
        kept.sort_unstable();
        let mut vocab: Vec<String> = vec![UNK.into(), BOS.into(), EOS.into()];
        vocab.extend(kept.iter().map(|w| w.to_string()));
        let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let remap: Vec<u32> = counts.names.iter().map(|w| index.get(w).copied().unwrap_or(UNK_ID)).collect();

        let levels = order.max(2);
        let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); levels];
        for (k, table) in counts.tables.iter().take(levels).enumerate() {
            for (gram, &n) in table {
                let key: Vec<u32> = gram.iter().map(|&t| remap[t as usize]).collect();
                *raw[k].entry(key).or_insert(0) += n;
            }
        }

        // Adjusted counts per order (index k holds n-grams of length k + 1).
        let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        for k in 0..order {
            let len = k + 1;
            if len == order && len >= 2 {
                adjusted[k] = raw[k].clone();
                continue;
            }
            let table = &mut adjusted[k];
            for gram in raw[k + 1].keys() {
                *table.entry(gram[1..].to_vec()).or_insert(0) += 1;
            }
            if len >= 2 {
                for (gram, &n) in &raw[k] {
                    if gram[0] == BOS_ID {
                        table.insert(gram.clone(), n);
                    }
                }
            }
        }

        let discounts: Vec<f64> = adjusted
            .iter()
            .map(|t| match config.discount {
                DiscountPolicy::Fixed(d) => d,
                DiscountPolicy::Estimate => discount_from_counts(t.values()),
            })
            .collect();

        let mut model = NGramModel {
            order,
            vocab,
            index,
            discounts,
            unigram_floor: config.unigram_floor,
            tables: vec![HashMap::new(); order],
        };

        // Unigrams over every predictable token.
        let predictable = model.predictable_size() as f64;
        let total: u64 = adjusted[0].values().sum();
        let types = adjusted[0].len() as f64;
        let d1 = model.discounts[0];
        for id in 0..model.vocab.len() as u32 {
            let log10_prob = if id == BOS_ID {
                BOS_LOG10
            } else {
                let c = adjusted[0].get(&vec![id]).copied().unwrap_or(0) as f64;
                let p = if config.unigram_floor {
                    (c - d1).max(0.0) / total as f64 + d1 * types / total as f64 / predictable
                } else {
                    c / total as f64
                };
                log10_or_neg_inf(p)
            };
            model.tables[0].insert(vec![id], Entry { log10_prob, log10_backoff: 0.0 });
        }

        for k in 1..order {
            let d = model.discounts[k];
            let mut contexts: HashMap<&[u32], (u64, u64)> = HashMap::new();
            for (gram, &c) in &adjusted[k] {
                let e = contexts.entry(&gram[..k]).or_insert((0, 0));
                e.0 += c;
                e.1 += 1;
            }
            let mut entries = Vec::with_capacity(adjusted[k].len());
            for (gram, &c) in &adjusted[k] {
                let (total, types) = contexts[&gram[..k]];
                let gamma = d * types as f64 / total as f64;
                let lower = model.log10_prob_ids(&gram[1..k], gram[k]);
                let p = (c as f64 - d).max(0.0) / total as f64 + gamma * 10f64.powf(lower);
                entries.push((gram.clone(), log10_or_neg_inf(p)));
            }
            for (gram, log10_prob) in entries {
                model.tables[k].insert(gram, Entry { log10_prob, log10_backoff: 0.0 });
            }
            for (ctx, (total, types)) in contexts {
                let gamma = d * types as f64 / total as f64;
                let entry = model.tables[k - 1].get_mut(ctx).expect("every context is a stored lower-order n-gram");
                entry.log10_backoff = gamma.log10();
            }
        }
        Ok(model)
    }

    /// Uniform model over `words` plus `<unk>` and `</s>`.
    pub fn uniform<S: AsRef<str>>(words: &[S]) -> Self {
        let mut kept: Vec<&str> = words.iter().map(AsRef::as_ref).filter(|w| ![UNK, BOS, EOS].contains(w)).collect();
        kept.sort_unstable();
        kept.dedup();
        let mut vocab: Vec<String> = vec![UNK.into(), BOS.into(), EOS.into()];
        vocab.extend(kept.iter().map(|w| w.to_string()));
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let predictable = (vocab.len() - 1) as f64;
        let mut unigrams = HashMap::new();
        for id in 0..vocab.len() as u32 {
            let log10_prob = if id == BOS_ID { BOS_LOG10 } else { (1.0 / predictable).log10() };
            unigrams.insert(vec![id], Entry { log10_prob, log10_backoff: 0.0 });
        }
        NGramModel {
            order: 1,
            vocab,
            index,
            discounts: vec![FALLBACK_DISCOUNT],
            unigram_floor: true,
            tables: vec![unigrams],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    /// Full vocabulary including `<unk>`, `<s>` and `</s>`.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Number of tokens the model can predict (every vocabulary entry except `<s>`).
    pub fn predictable_size(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Predictable tokens, in id order.
    pub fn predictable_tokens(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().enumerate().filter(|&(i, _)| i as u32 != BOS_ID).map(|(_, w)| w.as_str())
    }

    /// Every stored context (n-grams of order below the model order, plus the
    /// empty context), as token strings.
    pub fn contexts(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new()];
        for table in self.tables.iter().take(self.order.saturating_sub(1)) {
            let mut level: Vec<Vec<&str>> = table
                .keys()
                .filter(|g| g.last() != Some(&EOS_ID))
                .map(|g| g.iter().map(|&t| self.vocab[t as usize].as_str()).collect())
                .collect();
            level.sort();
            out.extend(level);
        }
        out
    }

    fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    fn log10_prob_ids(&self, context: &[u32], target: u32) -> f64 {
        let max_ctx = self.order - 1;
        let context = &context[context.len().saturating_sub(max_ctx)..];
        let mut backoff = 0.0;
        for start in 0..=context.len() {
            let mut gram = context[start..].to_vec();
            gram.push(target);
            if let Some(entry) = self.tables[gram.len() - 1].get(&gram) {
                return entry.log10_prob + backoff;
            }
            let ctx = &context[start..];
            if !ctx.is_empty() {
                if let Some(entry) = self.tables[ctx.len() - 1].get(ctx) {
                    backoff += entry.log10_backoff;
                }
            }
        }
        unreachable!("every vocabulary id has a unigram entry")
    }

    /// Natural-log probability of `token` after `context`. Only the last
    /// `order - 1` context tokens are used; out-of-vocabulary tokens are
    /// scored as `<unk>`.
    pub fn log_prob<S: AsRef<str>>(&self, token: &str, context: &[S]) -> f64 {
        let ctx: Vec<u32> = context.iter().map(|t| self.id(t.as_ref())).collect();
        self.log10_prob_ids(&ctx, self.id(token)) * std::f64::consts::LN_10
    }

    /// `exp(-mean log p)` over the tokens followed by `</s>`, starting from `<s>`.
    pub fn perplexity<S: AsRef<str>>(&self, tokens: &[S]) -> Result<f64, NGramError> {
        if tokens.is_empty() {
            return Err(NGramError::EmptyText);
        }
        let mut seq = Vec::with_capacity(tokens.len() + 2);
        seq.push(BOS_ID);
        seq.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        seq.push(EOS_ID);
        let mut total = 0.0;
        for i in 1..seq.len() {
            total += self.log10_prob_ids(&seq[..i], seq[i]);
        }
        let mean = total * std::f64::consts::LN_10 / (seq.len() - 1) as f64;
        Ok((-mean).exp())
    }

    /// Perplexity of a text split on whitespace.
    pub fn text_perplexity(&self, text: &str) -> Result<f64, NGramError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        self.perplexity(&tokens)
    }

    /// Serializes to the plain-text table format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# mixkit n-gram model");
        let _ = writeln!(out, "order\t{}", self.order);
        let _ = writeln!(out, "vocab\t{}", self.vocab.len());
        for (k, d) in self.discounts.iter().enumerate() {
            let _ = writeln!(out, "discount\t{}\t{}", k + 1, fmt_f64(*d));
        }
        let _ = writeln!(out, "unigram_floor\t{}", self.unigram_floor);
        for (k, table) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "\n\\{}-grams:", k + 1);
            let rows: BTreeMap<String, &Entry> = table
                .iter()
                .map(|(g, e)| {
                    let words: Vec<&str> = g.iter().map(|&t| self.vocab[t as usize].as_str()).collect();
                    (words.join(" "), e)
                })
                .collect();
            for (gram, e) in rows {
                let _ = writeln!(out, "{}\t{}\t{}", fmt_f64(e.log10_prob), gram, fmt_f64(e.log10_backoff));
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, NGramError> {
        let mut order = None;
        let mut discounts = BTreeMap::new();
        let mut unigram_floor = true;
        let mut vocab_size = None;
        let mut level: Option<usize> = None;
        let mut rows: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |message: String| NGramError::Parse { line: lineno, message };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let n: usize = rest
                    .strip_suffix("-grams:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| err(format!("bad section header {line:?}")))?;
                if n != rows.len() + 1 {
                    return Err(err(format!("section {n} out of order")));
                }
                rows.push(Vec::new());
                level = Some(n);
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match level {
                None => match fields.as_slice() {
                    ["order", n] => order = Some(n.parse().map_err(|_| err("bad order".into()))?),
                    ["vocab", n] => vocab_size = Some(n.parse::<usize>().map_err(|_| err("bad vocab".into()))?),
                    ["discount", k, d] => {
                        let k: usize = k.parse().map_err(|_| err("bad discount order".into()))?;
                        let d: f64 = d.parse().map_err(|_| err("bad discount".into()))?;
                        discounts.insert(k, d);
                    }
                    ["unigram_floor", b] => unigram_floor = b.parse().map_err(|_| err("bad unigram_floor".into()))?,
                    _ => return Err(err(format!("unknown header line {line:?}"))),
                },
                Some(n) => {
                    let [prob, gram, backoff] = fields.as_slice() else {
                        return Err(err("expected log10prob, ngram, backoff".into()));
                    };
                    let words: Vec<String> = gram.split(' ').map(str::to_string).collect();
                    if words.len() != n {
                        return Err(err(format!("{}-gram in section {n}", words.len())));
                    }
                    let entry = Entry {
                        log10_prob: prob.parse().map_err(|_| err("bad probability".into()))?,
                        log10_backoff: backoff.parse().map_err(|_| err("bad backoff".into()))?,
                    };
                    rows[n - 1].push((words, entry));
                }
            }
        }
        let parse_err = |message: &str| NGramError::Parse { line: 0, message: message.to_string() };
        let order = order.ok_or_else(|| parse_err("missing order"))?;
        if order < 1 || rows.len() != order {
            return Err(parse_err("section count does not match order"));
        }
        let discounts: Vec<f64> = (1..=order)
            .map(|k| discounts.get(&k).copied())
            .collect::<Option<_>>()
            .ok_or_else(|| parse_err("missing discount"))?;
        let mut vocab: Vec<String> = vec![UNK.into(), BOS.into(), EOS.into()];
        let mut words: Vec<String> =
            rows[0].iter().map(|(w, _)| w[0].clone()).filter(|w| ![UNK, BOS, EOS].contains(&w.as_str())).collect();
        words.sort_unstable();
        vocab.extend(words);
        if vocab_size != Some(vocab.len()) || rows[0].len() != vocab.len() {
            return Err(parse_err("vocabulary size mismatch"));
        }
        let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut tables = Vec::with_capacity(order);
        for level in rows {
            let mut table = HashMap::with_capacity(level.len());
            for (words, entry) in level {
                let ids = words
                    .iter()
                    .map(|w| index.get(w).copied())
                    .collect::<Option<Vec<u32>>>()
                    .ok_or_else(|| parse_err("n-gram uses a word missing from the unigrams"))?;
                table.insert(ids, entry);
            }
            tables.push(table);
        }
        Ok(NGramModel { order, vocab, index, discounts, unigram_floor, tables })
    }

    pub fn from_text(text: &str) -> Result<Self, NGramError> {
        Self::from_reader(text.as_bytes())
    }
}

fn fmt_f64(x: f64) -> String {
    // `{}` on f64 prints the shortest representation that parses back exactly.
    format!("{x}")
}
