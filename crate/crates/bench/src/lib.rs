//! Synthetic inputs shared by the benchmarks.

use mixkit_core::corpus::Document;
use mixkit_core::scaling::{LawParams, LossObservation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Documents of `words` words each over a Zipf-ish vocabulary.
pub fn documents(count: usize, words: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let text: Vec<String> = (0..words)
                .map(|_| {
                    let r: f64 = rng.gen();
                    format!("w{}", (r * r * 2000.0) as u32)
                })
                .collect();
            Document::new(format!("doc{i:06}"), text.join(" "))
        })
        .collect()
}

/// Noiseless 3 x 3 grid for one language.
pub fn scaling_grid() -> Vec<LossObservation> {
    let law = LawParams { e: 1.7, beta: 8.0, alpha: 0.3, c: 0.6 };
    let mut obs = Vec::new();
    for n in [100.7e6, 341.5e6, 1214.3e6] {
        for w in [0.2, 0.4, 0.6] {
            obs.push(LossObservation::new("fr", n, w, law.loss_scaled(n / 1e6, w)));
        }
    }
    obs
}
