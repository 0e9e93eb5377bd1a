//! Exact and MinHash/LSH near-duplicate detection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::{xxh3_128, xxh3_64};

use crate::corpus::{normalize_text, Document, NormalizePolicy};

pub const DEFAULT_NUM_PERM: usize = 128;
pub const DEFAULT_SHINGLE_K: usize = 5;
pub const DEFAULT_BANDS: usize = 32;
pub const DEFAULT_ROWS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// 2^61 - 1.
const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("text yields no shingles")]
    EmptyText,
    #[error("incompatible signatures: {0}")]
    Incompatible(String),
    #[error("bands ({bands}) x rows ({rows}) must equal num_perm ({num_perm})")]
    BandMismatch { bands: usize, rows: usize, num_perm: usize },
    #[error("signature store line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMethod {
    Exact,
    Fuzzy,
}

/// Duplicate clusters. The first id of each cluster is the kept
/// representative; the others were removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateReport {
    pub method: DedupMethod,
    pub clusters: Vec<Vec<String>>,
    pub removed: usize,
}

impl DuplicateReport {
    /// Ids that were dropped.
    pub fn removed_ids(&self) -> HashSet<&str> {
        self.clusters.iter().flat_map(|c| c.iter().skip(1)).map(String::as_str).collect()
    }
}

/// Keeps the first occurrence of each normalized text, comparing 128-bit
/// content hashes.
pub fn exact_dedup(docs: Vec<Document>, policy: NormalizePolicy) -> (Vec<Document>, DuplicateReport) {
    let mut first: HashMap<u128, usize> = HashMap::new();
    let mut clusters: Vec<Vec<String>> = Vec::new();
    let mut cluster_of: HashMap<u128, usize> = HashMap::new();
    let mut kept = Vec::with_capacity(docs.len());
    let mut removed = 0;
    for doc in docs {
        let hash = xxh3_128(normalize_text(&doc.text, policy).as_bytes());
        match first.get(&hash) {
            None => {
                first.insert(hash, kept.len());
                kept.push(doc);
            }
            Some(&idx) => {
                let cluster = *cluster_of.entry(hash).or_insert_with(|| {
                    clusters.push(vec![kept[idx].id.clone()]);
                    clusters.len() - 1
                });
                clusters[cluster].push(doc.id);
                removed += 1;
            }
        }
    }
    (kept, DuplicateReport { method: DedupMethod::Exact, clusters, removed })
}

/// Word k-shingles of `text`. Texts shorter than `k` words yield a single
/// shingle covering all their words.
pub fn word_shingles(text: &str, k: usize) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Vec::new();
    }
    let k = k.max(1);
    if words.len() <= k {
        return vec![words.join(" ")];
    }
    words.windows(k).map(|w| w.join(" ")).collect()
}

/// Exact Jaccard similarity of two texts' shingle sets.
pub fn exact_jaccard(a: &str, b: &str, k: usize) -> f64 {
    let sa: HashSet<String> = word_shingles(a, k).into_iter().collect();
    let sb: HashSet<String> = word_shingles(b, k).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Affine permutations `(a x + b) mod p` over the Mersenne prime 2^61 - 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHasher {
    num_perm: usize,
    shingle_k: usize,
    seed: u64,
    params: Vec<(u64, u64)>,
}

fn mul_mod_mersenne(a: u64, b: u64) -> u64 {
    let prod = a as u128 * b as u128;
    let lo = (prod & MERSENNE_61 as u128) as u64;
    let hi = (prod >> 61) as u64;
    let r = lo + hi;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

impl MinHasher {
    pub fn new(num_perm: usize, shingle_k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..num_perm).map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61))).collect();
        Self { num_perm, shingle_k, seed, params }
    }

    pub fn num_perm(&self) -> usize {
        self.num_perm
    }

    pub fn shingle_k(&self) -> usize {
        self.shingle_k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Signature of a pre-hashed shingle set.
    pub fn sign_hashes(&self, hashes: impl IntoIterator<Item = u64>) -> Option<MinHashSignature> {
        let mut values = vec![u64::MAX; self.num_perm];
        let mut any = false;
        for h in hashes {
            any = true;
            let x = h % MERSENNE_61;
            for (v, &(a, b)) in values.iter_mut().zip(&self.params) {
                let y = mul_mod_mersenne(a, x) + b;
                let y = if y >= MERSENNE_61 { y - MERSENNE_61 } else { y };
                if y < *v {
                    *v = y;
                }
            }
        }
        any.then_some(MinHashSignature { num_perm: self.num_perm, shingle_k: self.shingle_k, seed: self.seed, values })
    }

    pub fn sign_text(&self, text: &str) -> Result<MinHashSignature, DedupError> {
        let shingles = word_shingles(text, self.shingle_k);
        self.sign_hashes(shingles.iter().map(|s| xxh3_64(s.as_bytes()))).ok_or(DedupError::EmptyText)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub num_perm: usize,
    pub shingle_k: usize,
    pub seed: u64,
    pub values: Vec<u64>,
}

impl MinHashSignature {
    pub fn check_compatible(&self, other: &MinHashSignature) -> Result<(), DedupError> {
        if self.num_perm != other.num_perm || self.shingle_k != other.shingle_k || self.seed != other.seed {
            return Err(DedupError::Incompatible(format!(
                "(num_perm {}, k {}, seed {}) vs (num_perm {}, k {}, seed {})",
                self.num_perm, self.shingle_k, self.seed, other.num_perm, other.shingle_k, other.seed
            )));
        }
        if self.values.len() != self.num_perm || other.values.len() != other.num_perm {
            return Err(DedupError::Incompatible("value count differs from num_perm".into()));
        }
        Ok(())
    }
}

/// MinHash signature of a document's word shingles.
pub fn minhash_signature(
    doc: &Document,
    num_perm: usize,
    shingle_k: usize,
    seed: u64,
) -> Result<MinHashSignature, DedupError> {
    MinHasher::new(num_perm, shingle_k, seed).sign_text(&doc.text)
}

/// Fraction of signature positions that agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    a.check_compatible(b)?;
    let equal = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(equal as f64 / a.num_perm as f64)
}

/// Probability that two items with similarity `s` share at least one band.
pub fn lsh_collision_probability(s: f64, bands: usize, rows: usize) -> f64 {
    1.0 - (1.0 - s.powi(rows as i32)).powi(bands as i32)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Builds clusters from verified pairs: connected components of size two or
/// more, each listed with its smallest id first and the rest ascending.
pub fn clusters_from_pairs(ids: &[&str], pairs: impl IntoIterator<Item = (usize, usize)>) -> DuplicateReport {
    let mut uf = UnionFind::new(ids.len());
    for (a, b) in pairs {
        uf.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(id);
    }
    let mut clusters: Vec<Vec<String>> = groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|mut g| {
            g.sort_unstable();
            g.dedup();
            g.into_iter().map(str::to_string).collect()
        })
        .filter(|g: &Vec<String>| g.len() > 1)
        .collect();
    clusters.sort();
    let removed = clusters.iter().map(|c| c.len() - 1).sum();
    DuplicateReport { method: DedupMethod::Fuzzy, clusters, removed }
}

/// Banded LSH clustering. Candidate pairs share at least one band; a pair is
/// a duplicate when its estimated Jaccard is at least `threshold`. The
/// result does not depend on input order.
pub fn lsh_cluster(
    signatures: &[(String, MinHashSignature)],
    bands: usize,
    rows: usize,
    threshold: f64,
) -> Result<DuplicateReport, DedupError> {
    let Some((_, first)) = signatures.first() else {
        return Ok(DuplicateReport { method: DedupMethod::Fuzzy, clusters: Vec::new(), removed: 0 });
    };
    if bands * rows != first.num_perm {
        return Err(DedupError::BandMismatch { bands, rows, num_perm: first.num_perm });
    }
    for (_, sig) in signatures {
        first.check_compatible(sig)?;
    }
    let mut candidates: HashSet<(usize, usize)> = HashSet::new();
    for band in 0..bands {
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, (_, sig)) in signatures.iter().enumerate() {
            buckets.entry(&sig.values[band * rows..(band + 1) * rows]).or_default().push(i);
        }
        for members in buckets.values().filter(|m| m.len() > 1) {
            for (x, &a) in members.iter().enumerate() {
                for &b in &members[x + 1..] {
                    candidates.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let mut verified = Vec::new();
    for (a, b) in candidates {
        if estimate_jaccard(&signatures[a].1, &signatures[b].1)? >= threshold {
            verified.push((a, b));
        }
    }
    let ids: Vec<&str> = signatures.iter().map(|(id, _)| id.as_str()).collect();
    Ok(clusters_from_pairs(&ids, verified))
}

/// Incremental LSH index for streaming near-duplicate checks in input order.
#[derive(Debug, Clone)]
pub struct LshIndex {
    bands: usize,
    rows: usize,
    threshold: f64,
    buckets: HashMap<(usize, Vec<u64>), Vec<usize>>,
    stored: Vec<MinHashSignature>,
}

impl LshIndex {
    pub fn new(num_perm: usize, bands: usize, rows: usize, threshold: f64) -> Result<Self, DedupError> {
        if bands * rows != num_perm {
            return Err(DedupError::BandMismatch { bands, rows, num_perm });
        }
        Ok(Self { bands, rows, threshold, buckets: HashMap::new(), stored: Vec::new() })
    }

    /// Returns the index of a stored near-duplicate, or stores `sig` and
    /// returns `None`.
    pub fn check_and_insert(&mut self, sig: MinHashSignature) -> Result<Option<usize>, DedupError> {
        let mut seen = HashSet::new();
        for band in 0..self.bands {
            let key = (band, sig.values[band * self.rows..(band + 1) * self.rows].to_vec());
            if let Some(members) = self.buckets.get(&key) {
                for &m in members {
                    if seen.insert(m) && estimate_jaccard(&self.stored[m], &sig)? >= self.threshold {
                        return Ok(Some(m));
                    }
                }
            }
        }
        let idx = self.stored.len();
        for band in 0..self.bands {
            let key = (band, sig.values[band * self.rows..(band + 1) * self.rows].to_vec());
            self.buckets.entry(key).or_default().push(idx);
        }
        self.stored.push(sig);
        Ok(None)
    }
}

/// Kept documents, the cluster report and every document's signature.
pub type FuzzyDedupOutput = (Vec<Document>, DuplicateReport, Vec<(String, MinHashSignature)>);

/// Fuzzy dedup of a document list: kept documents (input order) are those not
/// removed by `lsh_cluster`.
pub fn fuzzy_dedup(
    docs: Vec<Document>,
    hasher: &MinHasher,
    bands: usize,
    rows: usize,
    threshold: f64,
) -> Result<FuzzyDedupOutput, DedupError> {
    let signatures =
        docs.iter().map(|d| Ok((d.id.clone(), hasher.sign_text(&d.text)?))).collect::<Result<Vec<_>, DedupError>>()?;
    let report = lsh_cluster(&signatures, bands, rows, threshold)?;
    let removed = report.removed_ids();
    let kept = docs.into_iter().filter(|d| !removed.contains(d.id.as_str())).collect();
    Ok((kept, report, signatures))
}

/// Writes a signature store: a header with the hashing parameters followed by
/// one `id<TAB>v1 v2 ...` row per document.
pub fn write_signatures<W: Write>(
    mut out: W,
    hasher: &MinHasher,
    signatures: &[(String, MinHashSignature)],
) -> io::Result<()> {
    writeln!(out, "num_perm={}\tshingle_k={}\tseed={}", hasher.num_perm, hasher.shingle_k, hasher.seed)?;
    for (id, sig) in signatures {
        let values: Vec<String> = sig.values.iter().map(u64::to_string).collect();
        writeln!(out, "{id}\t{}", values.join(" "))?;
    }
    out.flush()
}

pub fn read_signatures<R: BufRead>(reader: R) -> Result<Vec<(String, MinHashSignature)>, DedupError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or(DedupError::Parse { line: 1, message: "missing header".into() })?;
    let mut params = HashMap::new();
    for field in header.split('\t') {
        let (k, v) = field
            .split_once('=')
            .ok_or(DedupError::Parse { line: 1, message: format!("bad header field {field:?}") })?;
        let v: u64 = v.parse().map_err(|_| DedupError::Parse { line: 1, message: format!("bad value for {k}") })?;
        params.insert(k.to_string(), v);
    }
    let get = |k: &str| params.get(k).copied().ok_or(DedupError::Parse { line: 1, message: format!("missing {k}") });
    let (num_perm, shingle_k, seed) = (get("num_perm")? as usize, get("shingle_k")? as usize, get("seed")?);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let err = |message: &str| DedupError::Parse { line: i + 2, message: message.to_string() };
        let (id, rest) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
        let values =
            rest.split(' ').map(|v| v.parse::<u64>()).collect::<Result<Vec<_>, _>>().map_err(|_| err("bad value"))?;
        if values.len() != num_perm {
            return Err(err("value count differs from num_perm"));
        }
        out.push((id.to_string(), MinHashSignature { num_perm, shingle_k, seed, values }));
    }
    Ok(out)
}
