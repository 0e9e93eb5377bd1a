use std::collections::HashMap;

use mixkit_core::corpus::Document;
use mixkit_core::tokenizer::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MARKER: &[u8] = "\u{2581}".as_bytes();

fn cfg(merges: usize) -> TokenizerConfig {
    TokenizerConfig { vocab_size: BASE_VOCAB + merges, placeholder_count: DEFAULT_PLACEHOLDERS }
}

fn docs(texts: &[&str]) -> Vec<Document> {
    texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), *t)).collect()
}

fn hug_counts() -> ChunkCounts {
    let mut counts = ChunkCounts::default();
    for (word, n) in [("hug", 10), ("pug", 5), ("pun", 12), ("bun", 4), ("hugs", 5)] {
        counts.add_word(word, n);
    }
    counts
}

/// Textbook BPE over space-separated words: recount every pair each round,
/// take the most frequent, break ties on the smallest (left, right) spelling.
/// Symbols are spelled as display bytes with the marker as U+2581.
fn naive_bpe(words: &[(&str, u64)], merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut table: Vec<(Vec<Vec<u8>>, u64)> = words
        .iter()
        .map(|(w, n)| {
            let mut syms = vec![MARKER.to_vec()];
            syms.extend(w.bytes().map(|b| vec![b]));
            (syms, *n)
        })
        .collect();
    let mut learned = Vec::new();
    for _ in 0..merges {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for (syms, n) in &table {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += n;
            }
        }
        let Some(best) =
            counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))).map(|(pair, _)| pair)
        else {
            break;
        };
        for (syms, _) in &mut table {
            let mut out = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == best.0 && syms[i + 1] == best.1 {
                    out.push([best.0.clone(), best.1.clone()].concat());
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        learned.push(best);
    }
    learned
}

fn display(model: &TokenizerModel, id: TokenId) -> Vec<u8> {
    if (id as usize) < BYTE_TOKENS {
        vec![id as u8]
    } else {
        model.token_string(id).into_bytes()
    }
}

#[test]
fn merges_match_naive_reference() {
    let words: [(&str, u64); 5] = [("hug", 10), ("pug", 5), ("pun", 12), ("bun", 4), ("hugs", 5)];
    let model = train_from_counts(&hug_counts(), cfg(5)).unwrap();
    let expected = naive_bpe(&words, 5);
    let got: Vec<_> = model.merges().iter().map(|&(l, r)| (display(&model, l), display(&model, r))).collect();
    assert_eq!(got, expected);
    assert_eq!(got[0], (b"u".to_vec(), b"g".to_vec()));

    // "hug hug": the dummy prefix and the space both yield the "▁hug" token.
    let ids = model.encode_str("hug hug");
    let hug = model.vocab().iter().position(|v| v == "\u{2581}hug").unwrap() as TokenId;
    assert_eq!(ids, vec![hug, hug]);
    assert_eq!(model.decode_string(&ids).unwrap(), "hug hug");
}

#[test]
fn merges_match_naive_reference_on_random_corpora() {
    let alphabet = ["a", "b", "c", "ab", "ba"];
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<(String, u64)> = Vec::new();
        for _ in 0..12 {
            let len = rng.gen_range(1..5);
            let w: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
            if !words.iter().any(|(x, _)| *x == w) {
                words.push((w, rng.gen_range(1..20)));
            }
        }
        let mut counts = ChunkCounts::default();
        for (w, n) in &words {
            counts.add_word(w, *n);
        }
        let model = train_from_counts(&counts, cfg(8)).unwrap();
        let borrowed: Vec<(&str, u64)> = words.iter().map(|(w, n)| (w.as_str(), *n)).collect();
        let expected = naive_bpe(&borrowed, 8);
        let got: Vec<_> = model.merges().iter().map(|&(l, r)| (display(&model, l), display(&model, r))).collect();
        assert_eq!(got, expected, "seed {seed}");
    }
}

const CORPUS: &[&str] = &[
    "le chat est sur le tapis et le chien dort",
    "the cat sat on the mat while the dog slept",
    "les chats et les chiens jouent dans le jardin",
    "cats and dogs play in the garden all day long",
    "un deux trois quatre cinq six sept huit neuf dix",
];

#[test]
fn merge_list_is_prefix_closed() {
    let full = train_bpe(&docs(CORPUS), cfg(40)).unwrap();
    for k in [0, 1, 5, 17, 39] {
        let short = train_bpe(&docs(CORPUS), cfg(k)).unwrap();
        assert_eq!(short.merges(), &full.merges()[..k], "k={k}");
        assert_eq!(full.truncated(k).merges(), short.merges());
    }
}

#[test]
fn training_ignores_document_order() {
    let base = train_bpe(&docs(CORPUS), cfg(60)).unwrap().to_json();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut shuffled = CORPUS.to_vec();
        shuffled.shuffle(&mut rng);
        assert_eq!(train_bpe(&docs(&shuffled), cfg(60)).unwrap().to_json(), base);
    }
}

#[test]
fn ten_thousand_random_blobs_round_trip() {
    let model = train_bpe(&docs(CORPUS), cfg(80)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let len = rng.gen_range(0..64);
        let blob: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        assert_eq!(model.decode(&model.encode(&blob)).unwrap(), blob);
    }
}

#[test]
fn fertility_at_least_one_everywhere() {
    let fixtures: [&[&str]; 3] =
        [CORPUS, &["a b c d e f", "x\ty\nz"], &["électricité à l'été", "naïve café crème brûlée", "日本語 テキスト"]];
    for merges in [0, 10, 100, 400] {
        let model = train_bpe(&docs(CORPUS), cfg(merges)).unwrap();
        for fx in fixtures {
            let (tokens, words, f) = fertility(&model, &docs(fx)).unwrap();
            assert!(tokens >= words && f >= 1.0, "merges={merges} {fx:?}: {f}");
        }
    }
}

#[test]
fn byte_level_fertility_is_mean_word_bytes() {
    let model = TokenizerModel::byte_level(0);
    let texts = ["abc de", "f ghij klmno", "é ü"];
    let words: Vec<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
    let bytes: usize = words.iter().map(|w| w.len()).sum();
    let (_, _, f) = fertility(&model, &docs(&texts)).unwrap();
    assert!((f - bytes as f64 / words.len() as f64).abs() < 1e-12);
}

#[test]
fn two_by_two_comparison() {
    let fr = docs(&CORPUS[..1]);
    let en = docs(&CORPUS[1..2]);
    let trained = train_bpe(&docs(CORPUS), cfg(200)).unwrap();
    let bytes = TokenizerModel::byte_level(0);
    let matrix = compare_fertility(&[("bpe", &trained), ("bytes", &bytes)], &[("fr", &fr), ("en", &en)]).unwrap();
    assert_eq!(matrix.cells.len(), 4);
    for corpus in ["fr", "en"] {
        let a = matrix.cell("bpe", corpus).unwrap();
        let b = matrix.cell("bytes", corpus).unwrap();
        assert!(a.fertility < b.fertility);
        assert_eq!(a.words, b.words);
        let r =
            matrix.relative.iter().find(|r| r.corpus == corpus && r.model_a == "bpe" && r.model_b == "bytes").unwrap();
        assert!((r.percent - relative_efficiency_percent(a.fertility, b.fertility)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn round_trip_arbitrary_bytes(blob in proptest::collection::vec(any::<u8>(), 0..200)) {
        let model = train_from_counts(&hug_counts(), cfg(5)).unwrap();
        prop_assert_eq!(model.decode(&model.encode(&blob)).unwrap(), blob);
    }

    #[test]
    fn round_trip_arbitrary_text(text in "\\PC*") {
        let model = train_bpe(&docs(CORPUS), cfg(30)).unwrap();
        let ids = model.encode_str(&text);
        prop_assert!(ids.iter().all(|&id| id < model.placeholder_start()));
        prop_assert_eq!(model.decode_string(&ids).unwrap(), text);
    }
}
