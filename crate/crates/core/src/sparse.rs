//! Inverted index with BM25+ and TF-IDF cosine scoring.
//!
//! BM25+ per matching term:
//! `idf(t) * ((k1 + 1) * tf / (k1 * (1 - b + b * dl / avgdl) + tf) + delta)`
//! with `idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)`. Terms absent from the
//! document contribute nothing, so `delta` only lifts documents that match.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::corpus::{DocumentCollection, Query, RankedList};
use crate::error::{Error, Result};
use crate::text::{analyze, TokenizerConfig};

const INDEX_MAGIC: &[u8; 4] = b"SPX1";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub delta: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            delta: 1.0,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must be in [0, 1], got {}", self.b)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseScorer {
    Bm25Plus,
    Tfidf,
}

impl FromStr for SparseScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25plus" => Ok(Self::Bm25Plus),
            "tfidf" => Ok(Self::Tfidf),
            other => Err(Error::Config(format!("unknown scorer {other:?}"))),
        }
    }
}

impl SparseScorer {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bm25Plus => "bm25plus",
            Self::Tfidf => "tfidf",
        }
    }
}

/// `(doc index, term frequency)`.
pub type Posting = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    tokenizer: TokenizerConfig,
    params: Bm25Params,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    // L2 norms of the tf-idf document vectors
    tfidf_norms: Vec<f64>,
    empty_docs: usize,
}

/// Natural-log BM25 idf, shifted to stay non-negative.
pub fn bm25_idf(n: f64, df: f64) -> f64 {
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Smoothed tf-idf idf.
pub fn tfidf_idf(n: f64, df: f64) -> f64 {
    ((1.0 + n) / (1.0 + df)).ln() + 1.0
}

impl SparseIndex {
    pub fn build(
        docs: &DocumentCollection,
        tokenizer: &TokenizerConfig,
        params: Bm25Params,
    ) -> Result<Self> {
        tokenizer.validate()?;
        params.validate()?;
        if docs.is_empty() {
            return Err(Error::Empty("corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut empty_docs = 0;
        for (i, doc) in docs.docs().iter().enumerate() {
            let tokens = analyze(&doc.text, tokenizer);
            if tokens.is_empty() {
                log::warn!("document {} has no tokens after preprocessing", doc.id);
                empty_docs += 1;
            }
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((i as u32, c));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let mut idx = Self {
            tokenizer: tokenizer.clone(),
            params,
            postings,
            doc_ids: docs.ids().map(str::to_string).collect(),
            doc_lengths,
            avg_doc_length,
            tfidf_norms: Vec::new(),
            empty_docs,
        };
        idx.tfidf_norms = idx.compute_tfidf_norms();
        Ok(idx)
    }

    fn compute_tfidf_norms(&self) -> Vec<f64> {
        let n = self.doc_count() as f64;
        let mut sq = vec![0f64; self.doc_count()];
        for plist in self.postings.values() {
            let idf = tfidf_idf(n, plist.len() as f64);
            for &(d, tf) in plist {
                let w = f64::from(tf) * idf;
                sq[d as usize] += w * w;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Returns a copy scoring with different BM25+ parameters.
    pub fn with_params(&self, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn empty_docs(&self) -> usize {
        self.empty_docs
    }

    pub fn postings(&self, token: &str) -> &[Posting] {
        self.postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_index(&self, id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == id)
    }

    pub fn df(&self, token: &str) -> usize {
        self.postings(token).len()
    }

    pub fn tf(&self, token: &str, doc: usize) -> u32 {
        let plist = self.postings(token);
        plist
            .binary_search_by_key(&(doc as u32), |&(d, _)| d)
            .map(|i| plist[i].1)
            .unwrap_or(0)
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        analyze(text, &self.tokenizer)
    }

    fn bm25plus_term(&self, idf: f64, tf: u32, dl: u32) -> f64 {
        let Bm25Params { k1, b, delta } = self.params;
        let tf = f64::from(tf);
        let norm = k1 * (1.0 - b + b * f64::from(dl) / self.avg_doc_length);
        idf * ((k1 + 1.0) * tf / (norm + tf) + delta)
    }

    /// BM25+ score of one document. Duplicate query tokens count once.
    pub fn bm25plus_score(&self, query_tokens: &[String], doc: usize) -> f64 {
        let n = self.doc_count() as f64;
        let dl = self.doc_lengths[doc];
        distinct(query_tokens)
            .into_iter()
            .map(|t| match self.tf(t, doc) {
                0 => 0.0,
                tf => self.bm25plus_term(bm25_idf(n, self.df(t) as f64), tf, dl),
            })
            .sum()
    }

    /// Cosine between raw-count tf-idf vectors of the query and the document.
    pub fn tfidf_score(&self, query_tokens: &[String], doc: usize) -> f64 {
        let (weights, qnorm) = self.tfidf_query(query_tokens);
        let dnorm = self.tfidf_norms[doc];
        if qnorm == 0.0 || dnorm == 0.0 {
            return 0.0;
        }
        let dot: f64 = weights
            .iter()
            .map(|(t, qw, idf)| qw * f64::from(self.tf(t, doc)) * idf)
            .sum();
        dot / (qnorm * dnorm)
    }

    /// Query term weights `(term, tf*idf, idf)` in term order, plus the query vector norm.
    /// Terms absent from the corpus have no dimension in the vector space and are dropped.
    fn tfidf_query<'a>(&self, query_tokens: &'a [String]) -> (Vec<(&'a str, f64, f64)>, f64) {
        let n = self.doc_count() as f64;
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for t in query_tokens.iter().filter(|t| self.df(t) > 0) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let weights: Vec<_> = counts
            .into_iter()
            .map(|(t, c)| {
                let idf = tfidf_idf(n, self.df(t) as f64);
                (t, f64::from(c) * idf, idf)
            })
            .collect();
        let norm = weights.iter().map(|(_, w, _)| w * w).sum::<f64>().sqrt();
        (weights, norm)
    }

    /// Scores every document; index order.
    pub fn score_all(&self, query_tokens: &[String], scorer: SparseScorer) -> Vec<f64> {
        let mut scores = vec![0f64; self.doc_count()];
        let n = self.doc_count() as f64;
        match scorer {
            SparseScorer::Bm25Plus => {
                for t in distinct(query_tokens) {
                    let plist = self.postings(t);
                    if plist.is_empty() {
                        continue;
                    }
                    let idf = bm25_idf(n, plist.len() as f64);
                    for &(d, tf) in plist {
                        let d = d as usize;
                        scores[d] += self.bm25plus_term(idf, tf, self.doc_lengths[d]);
                    }
                }
            }
            SparseScorer::Tfidf => {
                let (weights, qnorm) = self.tfidf_query(query_tokens);
                if qnorm == 0.0 {
                    return scores;
                }
                for (t, qw, idf) in weights {
                    for &(d, tf) in self.postings(t) {
                        scores[d as usize] += qw * f64::from(tf) * idf;
                    }
                }
                for (s, &dn) in scores.iter_mut().zip(&self.tfidf_norms) {
                    *s = if dn == 0.0 { 0.0 } else { *s / (qnorm * dn) };
                }
            }
        }
        scores
    }

    /// Top-`k` documents for `query`; identical to scoring every document and sorting.
    pub fn search(&self, query: &Query, k: usize, scorer: SparseScorer) -> Result<RankedList> {
        let tokens = self.analyze(&query.text);
        self.search_tokens(&query.id, &tokens, k, scorer)
    }

    pub fn search_tokens(
        &self,
        query_id: &str,
        tokens: &[String],
        k: usize,
        scorer: SparseScorer,
    ) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let scores = self.score_all(tokens, scorer);
        RankedList::from_scores(
            query_id,
            self.doc_ids.iter().cloned().zip(scores).collect(),
            k,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut w = LeWriter::new(BufWriter::new(File::create(path).map_err(io)?));
        w.bytes(INDEX_MAGIC).map_err(io)?;
        w.u32(INDEX_VERSION).map_err(io)?;
        w.f64(self.params.k1).map_err(io)?;
        w.f64(self.params.b).map_err(io)?;
        w.f64(self.params.delta).map_err(io)?;
        let tok = serde_json::to_string(&self.tokenizer).map_err(|e| Error::Format(e.to_string()))?;
        w.long_str(&tok).map_err(io)?;
        w.u32(self.doc_count() as u32).map_err(io)?;
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            w.short_str(id).map_err(io)?;
            w.u32(len).map_err(io)?;
        }
        w.u32(self.postings.len() as u32).map_err(io)?;
        for (term, plist) in &self.postings {
            w.short_str(term).map_err(io)?;
            w.u32(plist.len() as u32).map_err(io)?;
            for &(d, tf) in plist {
                w.u32(d).map_err(io)?;
                w.u32(tf).map_err(io)?;
            }
        }
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = LeReader::new(&bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format(format!("{}: not a sparse index", path.display())));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
            delta: r.f64()?,
        };
        let tokenizer: TokenizerConfig =
            serde_json::from_str(&r.long_str()?).map_err(|e| Error::Format(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            doc_ids.push(r.short_str()?);
            doc_lengths.push(r.u32()?);
        }
        let terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..terms {
            let term = r.short_str()?;
            let len = r.u32()? as usize;
            let mut plist = Vec::with_capacity(len);
            for _ in 0..len {
                let d = r.u32()?;
                if d as usize >= n {
                    return Err(Error::Format(format!("posting for doc {d} out of range")));
                }
                plist.push((d, r.u32()?));
            }
            postings.insert(term, plist);
        }
        r.expect_end()?;
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        if n == 0 || total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut idx = Self {
            tokenizer,
            params,
            postings,
            empty_docs: doc_lengths.iter().filter(|&&l| l == 0).count(),
            avg_doc_length: total as f64 / n as f64,
            doc_ids,
            doc_lengths,
            tfidf_norms: Vec::new(),
        };
        idx.tfidf_norms = idx.compute_tfidf_norms();
        Ok(idx)
    }
}

fn distinct(tokens: &[String]) -> BTreeSet<&str> {
    tokens.iter().map(String::as_str).collect()
}
