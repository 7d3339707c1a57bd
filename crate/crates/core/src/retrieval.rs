//! Flat (exhaustive) dense search and the weighted multi-model ensemble.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentCollection, EmbeddingMatrix, Query, RankedList};
use crate::encoder::{EncoderModel, Role};
use crate::error::{Error, Result};

/// Encodes every document as a passage, preserving corpus order.
pub fn encode_corpus(model: &EncoderModel, docs: &DocumentCollection) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f32>> = docs
        .docs()
        .par_iter()
        .map(|d| model.encode(&d.text, Role::Passage).to_f32())
        .collect();
    let mut m = EmbeddingMatrix::new(model.dim())?;
    for (d, row) in docs.docs().iter().zip(rows) {
        m.push(d.id.clone(), &row)?;
    }
    Ok(m)
}

/// Dot product of the query embedding with every row, in row order.
pub fn dense_scores(query_vec: &[f64], matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if query_vec.len() != matrix.dim() {
        return Err(Error::DimMismatch {
            expected: matrix.dim(),
            actual: query_vec.len(),
        });
    }
    Ok(matrix
        .rows()
        .map(|(_, row)| {
            query_vec
                .iter()
                .zip(row)
                .map(|(q, &r)| q * f64::from(r))
                .sum()
        })
        .collect())
}

pub fn search_dense(
    query: &Query,
    model: &EncoderModel,
    matrix: &EmbeddingMatrix,
    k: usize,
) -> Result<RankedList> {
    let q = model.encode(&query.text, Role::Query);
    let scores = dense_scores(q.as_slice(), matrix)?;
    rank_from_scores(&query.id, &scores, matrix.ids(), k)
}

/// Top-`k` of a full score array under the global tie rule.
pub fn rank_from_scores(
    query_id: &str,
    scores: &[f64],
    doc_ids: &[String],
    k: usize,
) -> Result<RankedList> {
    if scores.len() != doc_ids.len() {
        return Err(Error::DimMismatch {
            expected: doc_ids.len(),
            actual: scores.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    RankedList::from_scores(
        query_id,
        doc_ids.iter().cloned().zip(scores.iter().copied()).collect(),
        k,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub models: Vec<PathBuf>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Min-max normalize the sparse scores per query before weighting.
    pub normalize_sparse: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            models: vec![PathBuf::from("ckpt/phase2.ckpt"), PathBuf::from("ckpt/phase1.ckpt")],
            weights: vec![0.6, 0.4],
            alpha: 0.1,
            normalize_sparse: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.weights, self.alpha)?;
        if self.models.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} ensemble models but {} weights",
                self.models.len(),
                self.weights.len()
            )));
        }
        Ok(())
    }
}

fn validate_weights(weights: &[f64], alpha: f64) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("ensemble needs at least one model".into()));
    }
    if weights.iter().chain([&alpha]).any(|w| !w.is_finite()) {
        return Err(Error::Config("ensemble weights must be finite".into()));
    }
    if weights.iter().all(|&w| w == 0.0) && alpha == 0.0 {
        return Err(Error::Config("all ensemble weights and alpha are zero".into()));
    }
    Ok(())
}

/// One ensemble member: a model and its pre-encoded corpus.
pub struct EnsembleMember<'a> {
    pub model: &'a EncoderModel,
    pub embeddings: &'a EmbeddingMatrix,
}

/// Min-max scaling to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(hi > lo) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// `s_j = sum_i w_i * Sim(V_Q^i, V_Dj^i) + alpha * b_j` over the whole corpus.
/// `sparse` holds one score per document, 0 for documents the sparse engine did not return.
pub fn ensemble_score(
    query: &Query,
    members: &[EnsembleMember<'_>],
    weights: &[f64],
    alpha: f64,
    sparse: &[f64],
    normalize_sparse: bool,
) -> Result<Vec<f64>> {
    validate_weights(weights, alpha)?;
    if members.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} ensemble members but {} weights",
            members.len(),
            weights.len()
        )));
    }
    let n = sparse.len();
    let ids = members.first().map(|m| m.embeddings.ids());
    let mut total = vec![0f64; n];
    for (m, &w) in members.iter().zip(weights) {
        if m.embeddings.dim() != m.model.dim() {
            return Err(Error::DimMismatch {
                expected: m.model.dim(),
                actual: m.embeddings.dim(),
            });
        }
        if m.embeddings.len() != n || Some(m.embeddings.ids()) != ids {
            return Err(Error::Config(
                "ensemble members must encode the same corpus as the sparse scores".into(),
            ));
        }
        let q = m.model.encode(&query.text, Role::Query);
        let sims = dense_scores(q.as_slice(), m.embeddings)?;
        for (t, s) in total.iter_mut().zip(sims) {
            *t += w * s;
        }
    }
    let b = if normalize_sparse {
        min_max_normalize(sparse)
    } else {
        sparse.to_vec()
    };
    for (t, bj) in total.iter_mut().zip(b) {
        *t += alpha * bj;
    }
    if let Some(j) = total.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("ensemble score for document {j}")));
    }
    Ok(total)
}
