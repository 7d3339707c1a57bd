//! In-batch InfoNCE training for [`EncoderModel`].
//!
//! A batch of `B` examples with `C` documents each (positive first, then
//! negatives) yields the similarity matrix `S = Q P^T` of shape `B x (B*C)`.
//! Row `i` is a softmax over its unmasked columns with the positive as target;
//! the loss is the row mean of `-log p(positive)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentCollection, Query, RelevanceJudgments};
use crate::encoder::{EncoderModel, Encoding, Gradient, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: Query,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl TrainingExample {
    /// Documents per query: the positive plus the negatives.
    pub fn docs_per_query(&self) -> usize {
        1 + self.negatives.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives.contains(&self.positive) {
            return Err(Error::Config(format!(
                "example for {} lists its positive {} as a negative",
                self.query.id, self.positive
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.negatives {
            if !seen.insert(n) {
                return Err(Error::Config(format!(
                    "example for {} repeats negative {n}",
                    self.query.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub mask_in_batch_positives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 40,
            batch_size: 2,
            temperature: 1.0,
            grad_accum_steps: 1,
            seed: 0,
            shuffle: true,
            mask_in_batch_positives: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config(
                "epochs, batch size and grad accumulation steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Encoded batch plus the column mask.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub batch_size: usize,
    pub docs_per_query: usize,
    pub query_ids: Vec<String>,
    pub doc_ids: Vec<String>,
    pub queries: Vec<Encoding>,
    pub docs: Vec<Encoding>,
    /// Column of row `i`'s positive, always `i * docs_per_query`.
    pub positive_index: Vec<usize>,
    /// `masked[i][j]`: column `j` is excluded from row `i`'s softmax.
    pub masked: Vec<Vec<bool>>,
}

impl TrainingBatch {
    pub fn shape(&self) -> (usize, usize) {
        (self.batch_size, self.batch_size * self.docs_per_query)
    }

    /// `S = Q P^T`.
    pub fn similarity_matrix(&self) -> Vec<Vec<f64>> {
        self.queries
            .iter()
            .map(|q| {
                self.docs
                    .iter()
                    .map(|p| crate::encoder::dot(q.embedding.as_slice(), p.embedding.as_slice()))
                    .collect()
            })
            .collect()
    }

    /// Number of softmax candidates in row `i`, positive included.
    pub fn candidates(&self, i: usize) -> usize {
        self.masked[i].iter().filter(|m| !**m).count()
    }
}

/// Encodes `examples` and builds the column mask. With `mask_relevant`, any
/// column judged relevant to row `i`'s query (other than its own positive
/// column) is dropped from row `i`.
pub fn assemble_batch(
    examples: &[TrainingExample],
    model: &EncoderModel,
    docs: &DocumentCollection,
    mask_relevant: Option<&RelevanceJudgments>,
) -> Result<TrainingBatch> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Empty("training batch".into()))?;
    let c = first.docs_per_query();
    if let Some(bad) = examples.iter().find(|e| e.docs_per_query() != c) {
        return Err(Error::Config(format!(
            "inconsistent documents per query in batch: {} vs {} (query {})",
            c,
            bad.docs_per_query(),
            bad.query.id
        )));
    }
    let b = examples.len();
    let mut doc_ids = Vec::with_capacity(b * c);
    for e in examples {
        e.validate()?;
        doc_ids.push(e.positive.clone());
        doc_ids.extend(e.negatives.iter().cloned());
    }
    // identical ids in one batch share one forward pass
    let mut cache: HashMap<&str, Encoding> = HashMap::new();
    for id in &doc_ids {
        if !cache.contains_key(id.as_str()) {
            let doc = docs.get(id).ok_or_else(|| Error::UnknownDoc(id.clone()))?;
            cache.insert(id, model.encode_full(&doc.text, Role::Passage));
        }
    }
    let doc_encs: Vec<Encoding> = doc_ids.iter().map(|id| cache[id.as_str()].clone()).collect();
    let queries: Vec<Encoding> = examples
        .iter()
        .map(|e| model.encode_full(&e.query.text, Role::Query))
        .collect();
    let positive_index: Vec<usize> = (0..b).map(|i| i * c).collect();
    let masked = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            doc_ids
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    j != positive_index[i]
                        && mask_relevant.is_some_and(|q| q.is_relevant(&e.query.id, d))
                })
                .collect()
        })
        .collect();
    Ok(TrainingBatch {
        batch_size: b,
        docs_per_query: c,
        query_ids: examples.iter().map(|e| e.query.id.clone()).collect(),
        doc_ids,
        queries,
        docs: doc_encs,
        positive_index,
        masked,
    })
}

/// Per-row softmax over unmasked columns of `S / tau`. Returns the row loss
/// and the probabilities (0 on masked columns).
fn row_softmax(sims: &[f64], masked: &[bool], pos: usize, tau: f64) -> (f64, Vec<f64>) {
    let max = sims
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(s, _)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims
        .iter()
        .zip(masked)
        .map(|(s, m)| if *m { 0.0 } else { (s / tau - max).exp() })
        .collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - sims[pos] / tau;
    (loss, exps.into_iter().map(|e| e / z).collect())
}

fn check_finite(sims: &[Vec<f64>]) -> Result<()> {
    if sims.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(())
}

/// Mean InfoNCE loss over the rows of `batch`.
pub fn infonce_loss(batch: &TrainingBatch, temperature: f64) -> Result<f64> {
    let sims = batch.similarity_matrix();
    check_finite(&sims)?;
    let total: f64 = sims
        .iter()
        .enumerate()
        .map(|(i, row)| row_softmax(row, &batch.masked[i], batch.positive_index[i], temperature).0)
        .sum();
    Ok(total / batch.batch_size as f64)
}

/// Loss and exact `dL/dW` for `batch`, backpropagating through the
/// normalization of every encoding.
pub fn loss_gradient(
    batch: &TrainingBatch,
    model: &EncoderModel,
    temperature: f64,
) -> Result<(f64, Gradient)> {
    let sims = batch.similarity_matrix();
    check_finite(&sims)?;
    let d = model.dim();
    let b = batch.batch_size as f64;
    let mut grad_q = vec![vec![0f64; d]; batch.queries.len()];
    let mut grad_p = vec![vec![0f64; d]; batch.docs.len()];
    let mut total = 0.0;
    for (i, row) in sims.iter().enumerate() {
        let pos = batch.positive_index[i];
        let (loss, probs) = row_softmax(row, &batch.masked[i], pos, temperature);
        total += loss;
        let q = batch.queries[i].embedding.as_slice();
        for (j, p) in probs.iter().enumerate() {
            if batch.masked[i][j] {
                continue;
            }
            let target = if j == pos { 1.0 } else { 0.0 };
            let ds = (p - target) / (temperature * b);
            if ds == 0.0 {
                continue;
            }
            let doc = batch.docs[j].embedding.as_slice();
            for ((gq, gp), (dv, qv)) in grad_q[i]
                .iter_mut()
                .zip(grad_p[j].iter_mut())
                .zip(doc.iter().zip(q))
            {
                *gq += ds * dv;
                *gp += ds * qv;
            }
        }
    }
    let mut grad = Gradient::new(d);
    for (enc, g) in batch.queries.iter().zip(&grad_q) {
        model.backprop(enc, g, &mut grad);
    }
    for (enc, g) in batch.docs.iter().zip(&grad_p) {
        model.backprop(enc, g, &mut grad);
    }
    Ok((total / b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub history: Vec<StepLog>,
    /// Batches whose negatives were truncated to a common length.
    pub truncated_batches: usize,
}

/// Cuts negatives so every example in the chunk has the chunk's smallest C.
fn equalize(chunk: &[&TrainingExample]) -> (Vec<TrainingExample>, bool) {
    let c = chunk.iter().map(|e| e.negatives.len()).min().unwrap_or(0);
    let mut truncated = false;
    let out = chunk
        .iter()
        .map(|e| {
            let mut e = (*e).clone();
            if e.negatives.len() > c {
                e.negatives.truncate(c);
                truncated = true;
            }
            e
        })
        .collect();
    (out, truncated)
}

/// Epoch order: identity, or a ChaCha20 shuffle seeded from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
    }
    order
}

/// Plain SGD. Each optimizer step averages the gradients of
/// `grad_accum_steps` consecutive micro-batches of `batch_size` examples.
pub fn train(
    model: &EncoderModel,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
    docs: &DocumentCollection,
    qrels: &RelevanceJudgments,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mask = cfg.mask_in_batch_positives.then_some(qrels);
    let mut model = model.clone();
    let mut history = Vec::new();
    let mut truncated_batches = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, epoch, cfg.shuffle);
        let micro: Vec<Vec<&TrainingExample>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| &dataset[i]).collect())
            .collect();
        for window in micro.chunks(cfg.grad_accum_steps) {
            let mut acc = Gradient::new(model.dim());
            let mut loss_sum = 0.0;
            for chunk in window {
                let (examples, truncated) = equalize(chunk);
                truncated_batches += usize::from(truncated);
                let batch = assemble_batch(&examples, &model, docs, mask)?;
                let (loss, grad) = loss_gradient(&batch, &model, cfg.temperature)?;
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch} step {step} (queries {:?})",
                        batch.query_ids
                    )));
                }
                loss_sum += loss;
                acc.add_scaled(&grad, 1.0);
            }
            let n = window.len() as f64;
            acc.scale(1.0 / n);
            if cfg.learning_rate != 0.0 {
                model.apply(&acc, cfg.learning_rate);
            }
            history.push(StepLog {
                epoch,
                step,
                loss: loss_sum / n,
            });
            step += 1;
        }
    }
    if truncated_batches > 0 {
        log::warn!("{truncated_batches} batches had negatives truncated to a common length");
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("weights after training".into()));
    }
    Ok(TrainOutcome {
        model,
        history,
        truncated_batches,
    })
}

/// Mean loss over the whole dataset, batched exactly as one unshuffled epoch.
pub fn dataset_loss(
    model: &EncoderModel,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
    docs: &DocumentCollection,
    qrels: &RelevanceJudgments,
) -> Result<f64> {
    let mask = cfg.mask_in_batch_positives.then_some(qrels);
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in dataset.chunks(cfg.batch_size) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let (examples, _) = equalize(&refs);
        let batch = assemble_batch(&examples, model, docs, mask)?;
        total += infonce_loss(&batch, cfg.temperature)? * examples.len() as f64;
        n += examples.len();
    }
    Ok(total / n as f64)
}
