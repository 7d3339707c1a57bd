//! Flat `key = value` pipeline configuration with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 1
//! paths.corpus = corpus.jsonl
//! phase1.B = 2
//! ensemble.weights = 0.6, 0.4
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{parse_cutoff_list, Cutoffs};
use crate::mining::MiningConfig;
use crate::retrieval::EnsembleConfig;
use crate::sparse::Bm25Params;
use crate::text::{CategoryClass, TokenizerConfig, TokenizerMode};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub workdir: PathBuf,
    pub stopwords: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            queries: "queries.jsonl".into(),
            qrels: "qrels.tsv".into(),
            workdir: "work".into(),
            stopwords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Fraction of judged queries held out for evaluation. At 0 (the default)
    /// every judged query is both trained on and evaluated.
    pub test_fraction: f64,
    pub tokenizer: TokenizerConfig,
    pub bm25: Bm25Params,
    pub encoder: EncoderConfig,
    pub mining: MiningConfig,
    pub phase1: TrainConfig,
    /// `None` runs phase 1 only.
    pub phase2: Option<TrainConfig>,
    pub ensemble: EnsembleConfig,
    pub cutoffs: Cutoffs,
    /// Depth of every run file.
    pub run_depth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            test_fraction: 0.0,
            tokenizer: TokenizerConfig::default(),
            bm25: Bm25Params::default(),
            encoder: EncoderConfig::default(),
            mining: MiningConfig::default(),
            phase1: TrainConfig {
                batch_size: 2,
                ..TrainConfig::default()
            },
            phase2: Some(TrainConfig {
                batch_size: 1,
                epochs: 10,
                ..TrainConfig::default()
            }),
            ensemble: EnsembleConfig::default(),
            cutoffs: Cutoffs::default(),
            run_depth: 200,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Splits the text into ordered `key -> value` pairs. `#` starts a comment at
/// the beginning of a line or after whitespace.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find(" #").or_else(|| raw.find("\t#")) {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        let v = v.trim().trim_matches('"');
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_kv(&parse_kv(&text)?, base)
    }

    /// Applies `kv` on top of the defaults. Relative paths are joined onto `base`.
    pub fn from_kv(kv: &BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut phase2 = c.phase2.clone().unwrap_or_default();
        let mut phase2_enabled = true;
        let mut ngram_n = 2usize;
        let mut mode = "unicode-words".to_string();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "seed" => c.seed = parse_value(k, v)?,
                "paths.corpus" => c.paths.corpus = resolve(v),
                "paths.queries" => c.paths.queries = resolve(v),
                "paths.qrels" => c.paths.qrels = resolve(v),
                "paths.workdir" => c.paths.workdir = resolve(v),
                "paths.stopwords" => c.paths.stopwords = Some(resolve(v)),
                "split.test_fraction" => c.test_fraction = parse_value(k, v)?,
                "tokenizer.mode" => mode = v.to_string(),
                "tokenizer.n" => ngram_n = parse_value(k, v)?,
                "tokenizer.lowercase" => c.tokenizer.lowercase = parse_bool(k, v)?,
                "tokenizer.strip" => {
                    c.tokenizer.strip = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            CategoryClass::parse(s)
                                .ok_or_else(|| Error::Config(format!("{k}: unknown category {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                "bm25.k1" => c.bm25.k1 = parse_value(k, v)?,
                "bm25.b" => c.bm25.b = parse_value(k, v)?,
                "bm25.delta" => c.bm25.delta = parse_value(k, v)?,
                "encoder.dim" => c.encoder.dim = parse_value(k, v)?,
                "encoder.vocab_buckets" => c.encoder.vocab_buckets = parse_value(k, v)?,
                "encoder.role_prefix" => c.encoder.role_prefix = parse_bool(k, v)?,
                "mining.a1" => c.mining.a1 = parse_value(k, v)?,
                "mining.per_query_negatives" => c.mining.per_query_negatives = parse_value(k, v)?,
                "mining.a2" => c.mining.a2 = parse_value(k, v)?,
                "mining.phase2_docs_per_query" => {
                    c.mining.phase2_docs_per_query = parse_value(k, v)?
                }
                "phase2.enabled" => phase2_enabled = parse_bool(k, v)?,
                "ensemble.models" => {
                    c.ensemble.models = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect()
                }
                "ensemble.weights" => c.ensemble.weights = parse_list(k, v)?,
                "ensemble.alpha" => c.ensemble.alpha = parse_value(k, v)?,
                "ensemble.normalize_sparse" => c.ensemble.normalize_sparse = parse_bool(k, v)?,
                "eval.recall" => c.cutoffs.recall = parse_cutoff_list(v)?,
                "eval.mrr" => c.cutoffs.mrr = parse_cutoff_list(v)?,
                "eval.map" => c.cutoffs.map = parse_cutoff_list(v)?,
                "eval.ndcg" => c.cutoffs.ndcg = parse_cutoff_list(v)?,
                "search.depth" => c.run_depth = parse_value(k, v)?,
                other => {
                    let target = match other.split_once('.') {
                        Some(("phase1", field)) => Some((&mut c.phase1, field)),
                        Some(("phase2", field)) => Some((&mut phase2, field)),
                        _ => None,
                    };
                    match target {
                        Some((t, field)) => set_train_field(t, k, field, v)?,
                        None => return Err(Error::Config(format!("unknown key {other:?}"))),
                    }
                }
            }
        }
        c.tokenizer.mode = match mode.as_str() {
            "unicode-words" => TokenizerMode::UnicodeWords,
            "char-ngram" => TokenizerMode::CharNgram { n: ngram_n },
            other => return Err(Error::Config(format!("unknown tokenizer mode {other:?}"))),
        };
        c.phase2 = phase2_enabled.then_some(phase2);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.bm25.validate()?;
        self.encoder.validate()?;
        self.mining.validate()?;
        self.phase1.validate()?;
        if let Some(p2) = &self.phase2 {
            p2.validate()?;
            if p2.batch_size != 1 {
                return Err(Error::Config(format!(
                    "phase 2 trains one query at a time; phase2.B must be 1, got {}",
                    p2.batch_size
                )));
            }
        }
        self.ensemble.validate()?;
        self.cutoffs.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "split.test_fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.run_depth < self.cutoffs.max_k() {
            return Err(Error::Config(format!(
                "search.depth {} is below the largest metric cutoff {}",
                self.run_depth,
                self.cutoffs.max_k()
            )));
        }
        Ok(())
    }

    /// Tokenizer used by both the sparse index and the encoder, stopwords loaded.
    pub fn resolved_tokenizer(&self) -> Result<TokenizerConfig> {
        match &self.paths.stopwords {
            Some(p) => self.tokenizer.clone().load_stopwords(p),
            None => Ok(self.tokenizer.clone()),
        }
    }

    /// Seeds for the independent random streams, all derived from `seed`.
    pub fn stream_seed(&self, stream: SeedStream) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stream as u64 + 1)
    }

    /// Canonical text form; equal configs render identically.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{self:#?}");
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    EncoderInit = 0,
    Mining = 1,
    Phase1 = 2,
    Phase2 = 3,
    Split = 4,
}

fn set_train_field(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "lr" | "learning_rate" => t.learning_rate = parse_value(key, v)?,
        "epochs" => t.epochs = parse_value(key, v)?,
        "B" | "batch_size" => t.batch_size = parse_value(key, v)?,
        "temperature" | "tau" => t.temperature = parse_value(key, v)?,
        "grad_accum_steps" => t.grad_accum_steps = parse_value(key, v)?,
        "shuffle" => t.shuffle = parse_bool(key, v)?,
        "mask_in_batch_positives" => t.mask_in_batch_positives = parse_bool(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}
