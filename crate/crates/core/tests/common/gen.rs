//! Seeded random corpora, queries, and training examples.

use lexdense::corpus::{Document, DocumentCollection, Query};
use lexdense::trainer::TrainingExample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Words drawn with a skewed distribution so document frequencies vary.
pub fn text(rng: &mut ChaCha20Rng, vocab: &[String], len: usize) -> String {
    (0..len)
        .map(|_| {
            let r: f64 = rng.gen();
            vocab[((r * r) * vocab.len() as f64) as usize].as_str()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn corpus(rng: &mut ChaCha20Rng, n_docs: usize, vocab: &[String], max_len: usize) -> DocumentCollection {
    DocumentCollection::new(
        (0..n_docs)
            .map(|i| {
                let len = rng.gen_range(1..=max_len);
                Document {
                    id: format!("d{i}"),
                    text: text(rng, vocab, len),
                    title: None,
                }
            })
            .collect(),
    )
    .unwrap()
}

pub fn queries(rng: &mut ChaCha20Rng, n: usize, vocab: &[String], max_len: usize) -> Vec<Query> {
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            Query {
                id: format!("q{i}"),
                text: text(rng, vocab, len),
            }
        })
        .collect()
}

/// `b` examples with `c - 1` distinct negatives each, drawn from `docs`.
pub fn examples(
    rng: &mut ChaCha20Rng,
    docs: &DocumentCollection,
    vocab: &[String],
    b: usize,
    c: usize,
) -> Vec<TrainingExample> {
    let ids: Vec<String> = docs.ids().map(str::to_string).collect();
    (0..b)
        .map(|i| {
            let picked: Vec<String> = ids.choose_multiple(rng, c).cloned().collect();
            let len = rng.gen_range(1..=4);
            TrainingExample {
                query: Query {
                    id: format!("q{i}"),
                    text: text(rng, vocab, len),
                },
                positive: picked[0].clone(),
                negatives: picked[1..].to_vec(),
            }
        })
        .collect()
}
