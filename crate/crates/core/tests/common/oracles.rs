//! Brute-force reference implementations written from the formulas, sharing no
//! scoring code with the library.

use std::collections::{BTreeMap, HashMap, HashSet};


use lexdense::corpus::DocumentCollection;
use lexdense::encoder::EncoderModel;
use lexdense::text::{analyze, TokenizerConfig};
use lexdense::trainer::TrainingExample;

// ---- encoder and InfoNCE ----

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `normalize(W * normalize(counts))`, with `e1` for a zero projection.
pub fn embed(model: &EncoderModel, text: &str, marker: &str) -> Vec<f64> {
    let cfg = model.config();
    let v = cfg.vocab_buckets as u64;
    let mut counts: HashMap<usize, f64> = HashMap::new();
    let mut toks = analyze(text, &cfg.tokenizer);
    if cfg.role_prefix {
        toks.push(marker.to_string());
    }
    for t in toks {
        *counts.entry((fnv(t.as_bytes()) % v) as usize).or_default() += 1.0;
    }
    let n = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    let d = model.dim();
    let mut raw = vec![0.0; d];
    for (&k, &c) in &counts {
        for (r, out) in raw.iter_mut().enumerate() {
            *out += model.weight(r, k) * c / n;
        }
    }
    let rn = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rn < 1e-12 {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        return e;
    }
    raw.iter().map(|x| x / rn).collect()
}

/// Softmax cross-entropy over each row of `sims / tau`, skipping masked
/// columns, averaged over rows. Written naively with a max shift.
pub fn softmax_ce(sims: &[Vec<f64>], masked: &[Vec<bool>], pos: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in sims.iter().enumerate() {
        let logits: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|(j, _)| !masked[i][*j])
            .map(|(_, s)| s / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - row[pos[i]] / tau;
    }
    total / sims.len() as f64
}

/// InfoNCE for `examples` under `model`, no masking, computed from scratch.
pub fn infonce(model: &EncoderModel, docs: &DocumentCollection, examples: &[TrainingExample], tau: f64) -> f64 {
    let mut cols = Vec::new();
    for e in examples {
        cols.push(e.positive.clone());
        cols.extend(e.negatives.iter().cloned());
    }
    let p: Vec<Vec<f64>> = cols
        .iter()
        .map(|id| embed(model, &docs.get(id).unwrap().text, "passage:"))
        .collect();
    let c = cols.len() / examples.len();
    let sims: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            let q = embed(model, &e.query.text, "query:");
            p.iter().map(|pv| pv.iter().zip(&q).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    let masked = vec![vec![false; cols.len()]; examples.len()];
    let pos: Vec<usize> = (0..examples.len()).map(|i| i * c).collect();
    softmax_ce(&sims, &masked, &pos, tau)
}

// ---- sparse scoring ----

pub struct BruteSparse {
    pub ids: Vec<String>,
    pub toks: Vec<Vec<String>>,
    pub avgdl: f64,
    df: HashMap<String, f64>,
    vocab: Vec<String>,
    /// Full tf*idf vector of every document over `vocab`.
    doc_vecs: Vec<Vec<f64>>,
}

impl BruteSparse {
    pub fn new(docs: &DocumentCollection, tok: &TokenizerConfig) -> Self {
        let ids: Vec<String> = docs.ids().map(str::to_string).collect();
        let toks: Vec<Vec<String>> = docs.docs().iter().map(|d| analyze(&d.text, tok)).collect();
        let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / toks.len() as f64;
        let mut vocab: Vec<String> = toks.iter().flatten().cloned().collect();
        vocab.sort();
        vocab.dedup();
        // df by scanning every document for every term
        let df: HashMap<String, f64> = vocab
            .iter()
            .map(|t| (t.clone(), toks.iter().filter(|d| d.contains(t)).count() as f64))
            .collect();
        let mut me = Self {
            ids,
            toks,
            avgdl,
            df,
            vocab,
            doc_vecs: Vec::new(),
        };
        me.doc_vecs = me.toks.iter().map(|d| me.tfidf_vec(d)).collect();
        me
    }

    fn df(&self, t: &str) -> f64 {
        self.df.get(t).copied().unwrap_or(0.0)
    }

    fn tf(toks: &[String], t: &str) -> f64 {
        toks.iter().filter(|x| *x == t).count() as f64
    }

    fn distinct(q: &[String]) -> Vec<String> {
        let mut out = q.to_vec();
        out.sort();
        out.dedup();
        out
    }

    fn bm25_idf(&self, t: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.df(t);
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// sum over distinct query terms with tf > 0 of
    /// idf * ((k1+1) tf / (k1 (1 - b + b dl/avgdl) + tf) + delta).
    pub fn bm25plus(&self, q: &[String], k1: f64, b: f64, delta: f64) -> Vec<f64> {
        let terms = Self::distinct(q);
        self.toks
            .iter()
            .map(|toks| {
                let dl = toks.len() as f64;
                let mut s = 0.0;
                for t in &terms {
                    let tf = Self::tf(toks, t);
                    if tf == 0.0 {
                        continue;
                    }
                    let norm = k1 * (1.0 - b + b * dl / self.avgdl) + tf;
                    s += self.bm25_idf(t) * ((k1 + 1.0) * tf / norm + delta);
                }
                s
            })
            .collect()
    }

    /// Classic Okapi BM25 with the same idf.
    pub fn bm25(&self, q: &[String], k1: f64, b: f64) -> Vec<f64> {
        let terms = Self::distinct(q);
        self.toks
            .iter()
            .map(|toks| {
                let dl = toks.len() as f64;
                terms
                    .iter()
                    .map(|t| {
                        let tf = Self::tf(toks, t);
                        self.bm25_idf(t) * (k1 + 1.0) * tf / (k1 * (1.0 - b + b * dl / self.avgdl) + tf)
                    })
                    .sum()
            })
            .collect()
    }

    fn tfidf_vec(&self, toks: &[String]) -> Vec<f64> {
        let n = self.ids.len() as f64;
        self.vocab
            .iter()
            .map(|t| Self::tf(toks, t) * (((1.0 + n) / (1.0 + self.df(t))).ln() + 1.0))
            .collect()
    }

    /// Cosine between full tf*idf vectors, idf = ln((1+N)/(1+df)) + 1.
    /// Query terms outside the corpus vocabulary have no dimension.
    pub fn tfidf(&self, q: &[String]) -> Vec<f64> {
        let qv = self.tfidf_vec(q);
        let qn = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.doc_vecs
            .iter()
            .map(|dv| {
                let dn = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if qn == 0.0 || dn == 0.0 {
                    return 0.0;
                }
                qv.iter().zip(dv).map(|(a, b)| a * b).sum::<f64>() / (qn * dn)
            })
            .collect()
    }

    /// Top-k under (score desc, id asc) by full sort.
    pub fn top_k(&self, scores: &[f64], k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = self.ids.iter().cloned().zip(scores.iter().copied()).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }
}

// ---- metrics ----

fn rel_set(grades: &BTreeMap<String, u32>) -> HashSet<&str> {
    grades.iter().filter(|(_, g)| **g > 0).map(|(d, _)| d.as_str()).collect()
}

pub fn recall(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let rel = rel_set(grades);
    if rel.is_empty() {
        return None;
    }
    let hit = rel.iter().filter(|r| ranking.iter().take(k).any(|d| d == *r)).count();
    Some(hit as f64 / rel.len() as f64)
}

pub fn mrr(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let rel = rel_set(grades);
    if rel.is_empty() {
        return None;
    }
    for (i, d) in ranking.iter().take(k).enumerate() {
        if rel.contains(d) {
            return Some(1.0 / (i + 1) as f64);
        }
    }
    Some(0.0)
}

pub fn map(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let rel = rel_set(grades);
    if rel.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for j in 1..=k.min(ranking.len()) {
        if rel.contains(ranking[j - 1]) {
            let hits = ranking[..j].iter().filter(|d| rel.contains(*d)).count();
            sum += hits as f64 / j as f64;
        }
    }
    Some(sum / rel.len() as f64)
}

pub fn ndcg(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    if rel_set(grades).is_empty() {
        return None;
    }
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(grades.get(*d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}
