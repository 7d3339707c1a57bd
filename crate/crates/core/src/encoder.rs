//! Trainable dual encoder: hashed bag-of-tokens features, linear projection,
//! L2 normalization. Query and passage share one weight matrix; an optional
//! role marker token distinguishes them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::text::{analyze, TokenizerConfig};

const CKPT_MAGIC: &[u8; 4] = b"ENC1";
const CKPT_VERSION: u32 = 1;
const FLAG_ROLE_PREFIX: u32 = 1;

/// Below this projection norm the encoder emits `e1` instead of dividing.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub const QUERY_MARKER: &str = "query:";
pub const PASSAGE_MARKER: &str = "passage:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

impl Role {
    fn marker(self) -> &'static str {
        match self {
            Role::Query => QUERY_MARKER,
            Role::Passage => PASSAGE_MARKER,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub vocab_buckets: usize,
    pub role_prefix: bool,
    pub tokenizer: TokenizerConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            vocab_buckets: 65_536,
            role_prefix: true,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("encoder dim must be >= 2, got {}", self.dim)));
        }
        if self.vocab_buckets < self.dim {
            return Err(Error::Config(format!(
                "vocab buckets ({}) must be >= dim ({})",
                self.vocab_buckets, self.dim
            )));
        }
        if u32::try_from(self.vocab_buckets).is_err() {
            return Err(Error::Config("vocab buckets must fit in u32".into()));
        }
        self.tokenizer.validate()
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `Sim(a, b) = <a, b>`.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything the backward pass needs from one forward encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub embedding: EmbeddingVector,
    /// Unit-norm sparse input, `(bucket, value)` sorted by bucket.
    pub features: Vec<(u32, f64)>,
    pub raw_norm: f64,
    /// True when the projection norm fell below [`DEGENERATE_NORM`].
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    seed: u64,
    // column-major: bucket k occupies cols[k * dim .. (k + 1) * dim]
    cols: Vec<f64>,
}

impl EncoderModel {
    /// Weights drawn i.i.d. uniform in `(-1/sqrt(V), 1/sqrt(V))` from ChaCha20
    /// seeded with `seed`, in row-major order of the `dim x V` matrix.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.dim, config.vocab_buckets);
        let bound = 1.0 / (v as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut cols = vec![0f64; d * v];
        for r in 0..d {
            for k in 0..v {
                cols[k * d + r] = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { config, seed, cols })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_buckets(&self) -> usize {
        self.config.vocab_buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `W[row][bucket]`.
    pub fn weight(&self, row: usize, bucket: usize) -> f64 {
        self.cols[bucket * self.dim() + row]
    }

    pub fn set_weight(&mut self, row: usize, bucket: usize, value: f64) {
        let d = self.dim();
        self.cols[bucket * d + row] = value;
    }

    /// The weight matrix in row-major `dim x V` order.
    pub fn weights_row_major(&self) -> Vec<f64> {
        let (d, v) = (self.dim(), self.vocab_buckets());
        let mut out = vec![0f64; d * v];
        for k in 0..v {
            for r in 0..d {
                out[r * v + k] = self.cols[k * d + r];
            }
        }
        out
    }

    pub fn column(&self, bucket: usize) -> &[f64] {
        let d = self.dim();
        &self.cols[bucket * d..(bucket + 1) * d]
    }

    pub(crate) fn column_mut(&mut self, bucket: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.cols[bucket * d..(bucket + 1) * d]
    }

    fn bucket(&self, token: &str) -> u32 {
        (fnv1a(token.as_bytes()) % self.vocab_buckets() as u64) as u32
    }

    /// L2-normalized hashed token counts, including the role marker when enabled.
    pub fn features(&self, text: &str, role: Role) -> Vec<(u32, f64)> {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        if self.config.role_prefix {
            *counts.entry(self.bucket(role.marker())).or_default() += 1.0;
        }
        for t in analyze(text, &self.config.tokenizer) {
            *counts.entry(self.bucket(&t)).or_default() += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        counts.into_iter().map(|(k, c)| (k, c / norm)).collect()
    }

    pub fn encode_features(&self, features: Vec<(u32, f64)>) -> Encoding {
        let d = self.dim();
        let mut raw = vec![0f64; d];
        for &(k, x) in &features {
            for (r, w) in raw.iter_mut().zip(self.column(k as usize)) {
                *r += w * x;
            }
        }
        let raw_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let fallback = !(raw_norm >= DEGENERATE_NORM);
        let values = if fallback {
            let mut e1 = vec![0f64; d];
            e1[0] = 1.0;
            e1
        } else {
            raw.iter().map(|x| x / raw_norm).collect()
        };
        Encoding {
            embedding: EmbeddingVector(values),
            features,
            raw_norm,
            fallback,
        }
    }

    pub fn encode_full(&self, text: &str, role: Role) -> Encoding {
        self.encode_features(self.features(text, role))
    }

    pub fn encode(&self, text: &str, role: Role) -> EmbeddingVector {
        self.encode_full(text, role).embedding
    }

    /// Accumulates `dL/dW` given `dL/d(embedding)` for one encoding.
    /// Fallback encodings contribute nothing.
    pub fn backprop(&self, enc: &Encoding, grad_out: &[f64], grad: &mut Gradient) {
        if enc.fallback {
            return;
        }
        let u = enc.embedding.as_slice();
        let proj = dot(grad_out, u);
        let grad_raw: Vec<f64> = grad_out
            .iter()
            .zip(u)
            .map(|(g, ui)| (g - proj * ui) / enc.raw_norm)
            .collect();
        for &(k, x) in &enc.features {
            let col = grad.column_mut(k);
            for (c, g) in col.iter_mut().zip(&grad_raw) {
                *c += g * x;
            }
        }
    }

    /// `W <- W - lr * grad`.
    pub fn apply(&mut self, grad: &Gradient, lr: f64) {
        for (&k, g) in &grad.cols {
            for (w, gi) in self.column_mut(k as usize).iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cols.iter().all(|w| w.is_finite())
    }

    /// Writes the `ENC1` checkpoint: magic, version, dim, V, flags, seed,
    /// tokenizer JSON, then `dim x V` f32 weights row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut w = LeWriter::new(BufWriter::new(File::create(path).map_err(io)?));
        w.bytes(CKPT_MAGIC).map_err(io)?;
        w.u32(CKPT_VERSION).map_err(io)?;
        w.u32(self.dim() as u32).map_err(io)?;
        w.u32(self.vocab_buckets() as u32).map_err(io)?;
        let flags = if self.config.role_prefix { FLAG_ROLE_PREFIX } else { 0 };
        w.u32(flags).map_err(io)?;
        w.u64(self.seed).map_err(io)?;
        let tok = serde_json::to_string(&self.config.tokenizer)
            .map_err(|e| Error::Format(e.to_string()))?;
        w.long_str(&tok).map_err(io)?;
        for x in self.weights_row_major() {
            w.f32(x as f32).map_err(io)?;
        }
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = LeReader::new(&bytes);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format(format!("{}: not an encoder checkpoint", path.display())));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dim = r.u32()? as usize;
        let vocab_buckets = r.u32()? as usize;
        let flags = r.u32()?;
        let seed = r.u64()?;
        let tokenizer: TokenizerConfig =
            serde_json::from_str(&r.long_str()?).map_err(|e| Error::Format(e.to_string()))?;
        let config = EncoderConfig {
            dim,
            vocab_buckets,
            role_prefix: flags & FLAG_ROLE_PREFIX != 0,
            tokenizer,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        if r.remaining() != dim * vocab_buckets * 4 {
            return Err(Error::Format(format!(
                "expected {} weight bytes, found {}",
                dim * vocab_buckets * 4,
                r.remaining()
            )));
        }
        let mut cols = vec![0f64; dim * vocab_buckets];
        for row in 0..dim {
            for k in 0..vocab_buckets {
                cols[k * dim + row] = f64::from(r.f32()?);
            }
        }
        let model = Self { config, seed, cols };
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("{}: non-finite weights", path.display())));
        }
        Ok(model)
    }

    /// Rounds every weight to f32, matching what a save/load cycle produces.
    pub fn quantize_f32(&mut self) {
        for w in &mut self.cols {
            *w = f64::from(*w as f32);
        }
    }
}

/// Sparse `dL/dW`, stored by touched bucket column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradient {
    dim: usize,
    cols: BTreeMap<u32, Vec<f64>>,
}

impl Gradient {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            cols: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn column_mut(&mut self, bucket: u32) -> &mut Vec<f64> {
        let d = self.dim;
        self.cols.entry(bucket).or_insert_with(|| vec![0f64; d])
    }

    /// `dL/dW[row][bucket]`.
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.cols
            .get(&(bucket as u32))
            .map(|c| c[row])
            .unwrap_or(0.0)
    }

    pub fn columns(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.cols.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// `self += other * scale`, columns merged in bucket order.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (&k, g) in &other.cols {
            let col = self.column_mut(k);
            for (c, x) in col.iter_mut().zip(g) {
                *c += x * scale;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for col in self.cols.values_mut() {
            for x in col.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.cols
            .values()
            .flat_map(|c| c.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.cols.values().flatten().all(|x| x.is_finite())
    }
}
