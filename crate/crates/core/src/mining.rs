//! Training-set construction for both phases.
//!
//! Phase 1 samples negatives from the BM25+ top-`a1` pool; in-batch easy
//! documents appear later, at batch assembly. Phase 2 takes the hardest
//! non-positive documents from the phase-1 model's dense top-`a2`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingMatrix, Query, QuerySet, RelevanceJudgments};
use crate::encoder::{fnv1a, EncoderModel};
use crate::error::{Error, Result};
use crate::retrieval::search_dense;
use crate::sparse::{SparseIndex, SparseScorer};
use crate::trainer::TrainingExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub a1: usize,
    pub per_query_negatives: usize,
    pub a2: usize,
    pub phase2_docs_per_query: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            a1: 50,
            per_query_negatives: 30,
            a2: 50,
            phase2_docs_per_query: 10,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a1 == 0 || self.a2 == 0 {
            return Err(Error::Config("a1 and a2 must be >= 1".into()));
        }
        if self.per_query_negatives > self.a1 {
            return Err(Error::Config(format!(
                "per-query negatives ({}) exceed a1 ({})",
                self.per_query_negatives, self.a1
            )));
        }
        if self.phase2_docs_per_query < 2 || self.phase2_docs_per_query > self.a2 + 1 {
            return Err(Error::Config(format!(
                "phase-2 docs per query must be in 2..={}, got {}",
                self.a2 + 1,
                self.phase2_docs_per_query
            )));
        }
        Ok(())
    }
}

/// Outcome of mining one query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mined {
    pub examples: Vec<TrainingExample>,
    /// The query had no positive judgment and was skipped.
    pub skipped: bool,
    /// Examples that received fewer negatives than requested.
    pub short: usize,
}

fn positives<'a>(query: &Query, qrels: &'a RelevanceJudgments) -> Vec<&'a str> {
    qrels.positives(&query.id)
}

fn sample_seed(seed: u64, query_id: &str, positive: &str) -> u64 {
    let mut key = Vec::with_capacity(16 + query_id.len() + positive.len());
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(query_id.as_bytes());
    key.push(0);
    key.extend_from_slice(positive.as_bytes());
    fnv1a(&key)
}

/// Phase-1 examples: one per positive, negatives sampled uniformly without
/// replacement from the BM25+ top-`a1` minus every positive of the query,
/// kept in pool rank order.
pub fn mine_global(
    query: &Query,
    qrels: &RelevanceJudgments,
    index: &SparseIndex,
    cfg: &MiningConfig,
) -> Result<Mined> {
    let pos = positives(query, qrels);
    if pos.is_empty() {
        log::warn!("query {} has no positive judgment; skipped", query.id);
        return Ok(Mined {
            skipped: true,
            ..Mined::default()
        });
    }
    let top = index.search(query, cfg.a1, SparseScorer::Bm25Plus)?;
    let pos_set: HashSet<&str> = pos.iter().copied().collect();
    let pool: Vec<&str> = top.doc_ids().filter(|d| !pos_set.contains(d)).collect();
    let mut mined = Mined::default();
    for p in pos {
        let negatives: Vec<String> = if pool.len() <= cfg.per_query_negatives {
            if pool.len() < cfg.per_query_negatives {
                mined.short += 1;
            }
            pool.iter().map(|d| d.to_string()).collect()
        } else {
            let mut rng = ChaCha20Rng::seed_from_u64(sample_seed(cfg.seed, &query.id, p));
            let mut picks =
                rand::seq::index::sample(&mut rng, pool.len(), cfg.per_query_negatives).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| pool[i].to_string()).collect()
        };
        mined.examples.push(TrainingExample {
            query: query.clone(),
            positive: p.to_string(),
            negatives,
        });
    }
    if mined.short > 0 {
        log::warn!(
            "query {}: only {} BM25+ negatives available, wanted {}",
            query.id,
            pool.len(),
            cfg.per_query_negatives
        );
    }
    Ok(mined)
}

/// Phase-2 examples: negatives are the first `phase2_docs_per_query - 1`
/// non-positives of the model's dense top-`a2`, hardest first.
pub fn mine_hard(
    query: &Query,
    qrels: &RelevanceJudgments,
    model: &EncoderModel,
    corpus_embeddings: &EmbeddingMatrix,
    cfg: &MiningConfig,
) -> Result<Mined> {
    let pos = positives(query, qrels);
    if pos.is_empty() {
        log::warn!("query {} has no positive judgment; skipped", query.id);
        return Ok(Mined {
            skipped: true,
            ..Mined::default()
        });
    }
    let top = search_dense(query, model, corpus_embeddings, cfg.a2)?;
    let pos_set: HashSet<&str> = pos.iter().copied().collect();
    let want = cfg.phase2_docs_per_query - 1;
    let hard: Vec<String> = top
        .doc_ids()
        .filter(|d| !pos_set.contains(d))
        .take(want)
        .map(str::to_string)
        .collect();
    let short = if hard.len() < want { pos.len() } else { 0 };
    if short > 0 {
        log::warn!(
            "query {}: only {} hard negatives in top-{}, wanted {want}",
            query.id,
            hard.len(),
            cfg.a2
        );
    }
    Ok(Mined {
        examples: pos
            .into_iter()
            .map(|p| TrainingExample {
                query: query.clone(),
                positive: p.to_string(),
                negatives: hard.clone(),
            })
            .collect(),
        skipped: false,
        short,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedDataset {
    pub examples: Vec<TrainingExample>,
    pub skipped_queries: usize,
    pub short_examples: usize,
}

fn collect(
    queries: &[&Query],
    mut mine: impl FnMut(&Query) -> Result<Mined>,
) -> Result<MinedDataset> {
    let mut sorted: Vec<&Query> = queries.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = MinedDataset::default();
    for q in sorted {
        let m = mine(q)?;
        out.skipped_queries += usize::from(m.skipped);
        out.short_examples += m.short;
        out.examples.extend(m.examples);
    }
    Ok(out)
}

/// [`mine_global`] over many queries, output ordered by query id.
pub fn mine_global_all(
    queries: &[&Query],
    qrels: &RelevanceJudgments,
    index: &SparseIndex,
    cfg: &MiningConfig,
) -> Result<MinedDataset> {
    cfg.validate()?;
    collect(queries, |q| mine_global(q, qrels, index, cfg))
}

/// [`mine_hard`] over many queries, output ordered by query id.
pub fn mine_hard_all(
    queries: &[&Query],
    qrels: &RelevanceJudgments,
    model: &EncoderModel,
    corpus_embeddings: &EmbeddingMatrix,
    cfg: &MiningConfig,
) -> Result<MinedDataset> {
    cfg.validate()?;
    collect(queries, |q| mine_hard(q, qrels, model, corpus_embeddings, cfg))
}

#[derive(Serialize, Deserialize)]
struct MinedRecord {
    query_id: String,
    positive: String,
    negatives: Vec<String>,
}

pub fn write_mined(examples: &[TrainingExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for e in examples {
        let rec = MinedRecord {
            query_id: e.query.id.clone(),
            positive: e.positive.clone(),
            negatives: e.negatives.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a mined dataset, resolving query ids against `queries`.
pub fn read_mined(path: impl AsRef<Path>, queries: &QuerySet) -> Result<Vec<TrainingExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MinedRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let query = queries
            .get(&rec.query_id)
            .ok_or_else(|| Error::parse(path, i + 1, format!("unknown query {:?}", rec.query_id)))?
            .clone();
        let ex = TrainingExample {
            query,
            positive: rec.positive,
            negatives: rec.negatives,
        };
        ex.validate()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}
