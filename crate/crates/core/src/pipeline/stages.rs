//! The staged run over a fixed work-dir layout.
//!
//! Every stage reads its inputs from disk and writes its outputs atomically.
//! Before a stage runs, every downstream output is deleted, so an artifact
//! that exists was always produced from the current upstream artifacts.
//! `config.lock` records the config and input digests; when it changes,
//! all artifacts are discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, SeedStream};
use crate::corpus::{
    load_corpus, load_qrels, load_queries, read_embeddings, read_run, write_embeddings, write_run,
    DocumentCollection, EmbeddingMatrix, Query, QuerySet, RankedList, RelevanceJudgments,
};
use crate::encoder::{fnv1a, EncoderModel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_run, MetricReport};
use crate::mining::{mine_global_all, mine_hard_all, read_mined, write_mined, MiningConfig};
use crate::retrieval::{encode_corpus, ensemble_score, rank_from_scores, search_dense, EnsembleMember};
use crate::sparse::{SparseIndex, SparseScorer};
use crate::trainer::{train, StepLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    BuildIndex,
    MinePhase1,
    TrainPhase1,
    EncodePhase1,
    MinePhase2,
    TrainPhase2,
    EncodePhase2,
    Search,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::BuildIndex,
        Stage::MinePhase1,
        Stage::TrainPhase1,
        Stage::EncodePhase1,
        Stage::MinePhase2,
        Stage::TrainPhase2,
        Stage::EncodePhase2,
        Stage::Search,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildIndex => "build-index",
            Stage::MinePhase1 => "mine-phase1",
            Stage::TrainPhase1 => "train-phase1",
            Stage::EncodePhase1 => "encode-phase1",
            Stage::MinePhase2 => "mine-phase2",
            Stage::TrainPhase2 => "train-phase2",
            Stage::EncodePhase2 => "encode-phase2",
            Stage::Search => "search",
            Stage::Evaluate => "eval",
        }
    }

    fn is_phase2(self) -> bool {
        matches!(self, Stage::MinePhase2 | Stage::TrainPhase2 | Stage::EncodePhase2)
    }
}

/// Paths of every artifact under the work dir.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join("config.lock")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index/sparse.idx")
    }
    pub fn mined(&self, phase: u8) -> PathBuf {
        self.root.join(format!("mined/phase{phase}.jsonl"))
    }
    pub fn checkpoint(&self, phase: u8) -> PathBuf {
        self.root.join(format!("ckpt/phase{phase}.ckpt"))
    }
    pub fn embeddings(&self, phase: u8) -> PathBuf {
        self.root.join(format!("emb/phase{phase}.emb"))
    }
    pub fn train_log(&self, phase: u8) -> PathBuf {
        self.root.join(format!("logs/phase{phase}.jsonl"))
    }
    pub fn run(&self, system: &str) -> PathBuf {
        self.root.join(format!("runs/{system}.run"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Systems evaluated by a run, in report order.
pub fn systems(cfg: &PipelineConfig) -> Vec<&'static str> {
    let mut s = vec!["bm25plus", "tfidf", "phase1"];
    if cfg.phase2.is_some() {
        s.push("phase2");
    }
    s.push("ensemble");
    s
}

/// Per-system metric reports plus the query split they were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub train_queries: usize,
    pub eval_queries: usize,
    pub systems: BTreeMap<String, MetricReport>,
}

impl PipelineReport {
    pub fn metric(&self, system: &str, label: &str) -> Option<f64> {
        self.systems.get(system).and_then(|r| r.get(label))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

/// Inputs shared by every stage.
pub struct Inputs {
    pub docs: DocumentCollection,
    pub queries: QuerySet,
    pub qrels: RelevanceJudgments,
    /// Judged query ids used for mining and training.
    pub train_ids: Vec<String>,
    /// Judged query ids searched and evaluated.
    pub eval_ids: Vec<String>,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let docs = load_corpus(&cfg.paths.corpus)?;
        let queries = load_queries(&cfg.paths.queries)?;
        let loaded = load_qrels(&cfg.paths.qrels)?;
        let mut qrels = RelevanceJudgments::new();
        let mut dropped = 0;
        for (q, d, g) in loaded.qrels.iter() {
            if docs.get(d).is_some() {
                qrels.insert(q, d, g)?;
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::warn!("{dropped} qrels lines name documents missing from the corpus; ignored");
        }
        let mut judged: Vec<String> = queries
            .queries()
            .iter()
            .filter(|q| !qrels.positives(&q.id).is_empty())
            .map(|q| q.id.clone())
            .collect();
        if judged.is_empty() {
            return Err(Error::Empty("queries with a positive judgment".into()));
        }
        judged.sort();
        let (train_ids, eval_ids) = split(judged, cfg.test_fraction, cfg.stream_seed(SeedStream::Split));
        Ok(Self {
            docs,
            queries,
            qrels,
            train_ids,
            eval_ids,
        })
    }

    fn select(&self, ids: &[String]) -> Vec<&Query> {
        ids.iter().filter_map(|id| self.queries.get(id)).collect()
    }

    pub fn train_queries(&self) -> Vec<&Query> {
        self.select(&self.train_ids)
    }

    pub fn eval_queries(&self) -> Vec<&Query> {
        self.select(&self.eval_ids)
    }
}

/// Seeded hold-out split of sorted ids. A zero fraction trains and evaluates on everything.
fn split(mut ids: Vec<String>, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    if fraction == 0.0 || ids.len() < 2 {
        return (ids.clone(), ids);
    }
    ids.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let n_eval = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut eval = ids.split_off(ids.len() - n_eval);
    ids.sort();
    eval.sort();
    (ids, eval)
}

/// Writes through a temporary sibling and renames it into place.
fn atomic<T>(path: &Path, write: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let out = write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log(history: &[StepLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for h in history {
        serde_json::to_writer(&mut out, h).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {}; run {} first",
            path.display(),
            producer.name()
        )))
    }
}

fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a(&bytes))
}

/// A configured pipeline bound to its work dir.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    inputs: Option<Inputs>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase2.is_none() {
            let p2 = Path::new("ckpt/phase2.ckpt");
            if cfg.ensemble.models.iter().any(|m| m == p2) {
                return Err(Error::Config(
                    "phase 2 is disabled but ensemble.models lists ckpt/phase2.ckpt".into(),
                ));
            }
        }
        let layout = Layout::new(&cfg.paths.workdir);
        Ok(Self {
            cfg,
            layout,
            inputs: None,
        })
    }

    pub fn inputs(&mut self) -> Result<&Inputs> {
        if self.inputs.is_none() {
            self.inputs = Some(Inputs::load(&self.cfg)?);
        }
        Ok(self.inputs.as_ref().expect("just loaded"))
    }

    pub fn stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.cfg.phase2.is_some() || !s.is_phase2())
            .collect()
    }

    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let l = &self.layout;
        match stage {
            Stage::BuildIndex => vec![l.index()],
            Stage::MinePhase1 => vec![l.mined(1)],
            Stage::TrainPhase1 => vec![l.checkpoint(1), l.train_log(1)],
            Stage::EncodePhase1 => vec![l.embeddings(1)],
            Stage::MinePhase2 => vec![l.mined(2)],
            Stage::TrainPhase2 => vec![l.checkpoint(2), l.train_log(2)],
            Stage::EncodePhase2 => vec![l.embeddings(2)],
            Stage::Search => systems(&self.cfg).into_iter().map(|s| l.run(s)).collect(),
            Stage::Evaluate => vec![l.report()],
        }
    }

    fn all_outputs(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = Stage::ALL.iter().flat_map(|&s| self.outputs(s)).collect();
        out.push(self.layout.run("phase2"));
        out
    }

    fn lock_text(&self) -> Result<String> {
        let p = &self.cfg.paths;
        let mut s = self.cfg.canonical();
        for path in [Some(&p.corpus), Some(&p.queries), Some(&p.qrels), p.stopwords.as_ref()]
            .into_iter()
            .flatten()
        {
            s.push_str(&format!("{:016x} {}\n", file_digest(path)?, path.display()));
        }
        Ok(s)
    }

    /// Discards every artifact if the config or inputs changed since the last run.
    pub fn sync_lock(&self) -> Result<bool> {
        let want = self.lock_text()?;
        let lock = self.layout.lock();
        if fs::read_to_string(&lock).ok().as_deref() == Some(want.as_str()) {
            return Ok(false);
        }
        if lock.exists() {
            log::info!("configuration or inputs changed; discarding previous artifacts");
        }
        for p in self.all_outputs() {
            remove_if_exists(&p)?;
        }
        atomic(&lock, |tmp| fs::write(tmp, &want).map_err(|e| Error::io(tmp, e)))?;
        Ok(true)
    }

    fn is_complete(&self, stage: Stage) -> bool {
        self.outputs(stage).iter().all(|p| p.exists())
    }

    fn invalidate_downstream(&self, stage: Stage) -> Result<()> {
        for s in Stage::ALL.into_iter().filter(|&s| s > stage) {
            for p in self.outputs(s) {
                remove_if_exists(&p)?;
            }
        }
        Ok(())
    }

    /// Runs one stage unconditionally, after syncing the lock.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        if stage.is_phase2() && self.cfg.phase2.is_none() {
            return Err(Error::Config(format!("{} needs phase 2 enabled", stage.name())));
        }
        self.sync_lock().map_err(in_stage(stage))?;
        self.execute(stage)
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.name());
        self.invalidate_downstream(stage)
            .and_then(|_| self.execute_inner(stage))
            .map_err(in_stage(stage))
    }

    fn execute_inner(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::BuildIndex => self.build_index(),
            Stage::MinePhase1 => self.mine_phase1(),
            Stage::TrainPhase1 => self.train_phase(1),
            Stage::EncodePhase1 => self.encode_phase(1),
            Stage::MinePhase2 => self.mine_phase2(),
            Stage::TrainPhase2 => self.train_phase(2),
            Stage::EncodePhase2 => self.encode_phase(2),
            Stage::Search => self.search_all(),
            Stage::Evaluate => self.evaluate().map(|_| ()),
        }
    }

    /// Runs every stage whose outputs are missing, and everything after it.
    pub fn run(&mut self) -> Result<PipelineOutcome> {
        // input problems surface while hashing them for the lock
        self.sync_lock().map_err(in_stage(Stage::BuildIndex))?;
        let mut executed = Vec::new();
        let mut reused = Vec::new();
        for stage in self.stages() {
            if executed.is_empty() && self.is_complete(stage) {
                reused.push(stage);
            } else {
                self.execute(stage)?;
                executed.push(stage);
            }
        }
        let report = self.read_report()?;
        Ok(PipelineOutcome {
            report,
            executed,
            reused,
        })
    }

    pub fn read_report(&self) -> Result<PipelineReport> {
        let path = self.layout.report();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn load_index(&self) -> Result<SparseIndex> {
        let path = self.layout.index();
        require(&path, Stage::BuildIndex)?;
        SparseIndex::load(path)
    }

    pub fn load_model(&self, phase: u8) -> Result<EncoderModel> {
        let path = self.layout.checkpoint(phase);
        require(&path, if phase == 1 { Stage::TrainPhase1 } else { Stage::TrainPhase2 })?;
        EncoderModel::load(path)
    }

    pub fn load_embeddings(&self, phase: u8) -> Result<EmbeddingMatrix> {
        let path = self.layout.embeddings(phase);
        require(&path, if phase == 1 { Stage::EncodePhase1 } else { Stage::EncodePhase2 })?;
        read_embeddings(path)
    }

    fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            seed: self.cfg.stream_seed(SeedStream::Mining),
            ..self.cfg.mining.clone()
        }
    }

    fn build_index(&mut self) -> Result<()> {
        let tokenizer = self.cfg.resolved_tokenizer()?;
        let params = self.cfg.bm25;
        let index = SparseIndex::build(&self.inputs()?.docs, &tokenizer, params)?;
        atomic(&self.layout.index(), |tmp| index.save(tmp))
    }

    fn mine_phase1(&mut self) -> Result<()> {
        let index = self.load_index()?;
        let mining = self.mining_config();
        let inputs = self.inputs()?;
        let mined = mine_global_all(&inputs.train_queries(), &inputs.qrels, &index, &mining)?;
        log::info!(
            "phase 1: {} examples, {} short",
            mined.examples.len(),
            mined.short_examples
        );
        atomic(&self.layout.mined(1), |tmp| write_mined(&mined.examples, tmp))
    }

    fn mine_phase2(&mut self) -> Result<()> {
        let model = self.load_model(1)?;
        let emb = self.load_embeddings(1)?;
        let mining = self.mining_config();
        let inputs = self.inputs()?;
        let mined = mine_hard_all(&inputs.train_queries(), &inputs.qrels, &model, &emb, &mining)?;
        log::info!(
            "phase 2: {} examples, {} short",
            mined.examples.len(),
            mined.short_examples
        );
        atomic(&self.layout.mined(2), |tmp| write_mined(&mined.examples, tmp))
    }

    fn train_config(&self, phase: u8) -> TrainConfig {
        let (base, stream) = match phase {
            1 => (self.cfg.phase1.clone(), SeedStream::Phase1),
            _ => (self.cfg.phase2.clone().unwrap_or_default(), SeedStream::Phase2),
        };
        TrainConfig {
            seed: self.cfg.stream_seed(stream),
            ..base
        }
    }

    fn train_phase(&mut self, phase: u8) -> Result<()> {
        let start = if phase == 1 {
            let mut enc = self.cfg.encoder.clone();
            enc.tokenizer = self.cfg.resolved_tokenizer()?;
            EncoderModel::init(enc, self.cfg.stream_seed(SeedStream::EncoderInit))?
        } else {
            self.load_model(1)?
        };
        let mined_path = self.layout.mined(phase);
        require(
            &mined_path,
            if phase == 1 { Stage::MinePhase1 } else { Stage::MinePhase2 },
        )?;
        let tcfg = self.train_config(phase);
        let inputs = self.inputs()?;
        let dataset = read_mined(&mined_path, &inputs.queries)?;
        let outcome = train(&start, &dataset, &tcfg, &inputs.docs, &inputs.qrels)?;
        if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
            log::info!(
                "phase {phase}: {} steps, loss {:.4} -> {:.4}",
                outcome.history.len(),
                first.loss,
                last.loss
            );
        }
        atomic(&self.layout.train_log(phase), |tmp| write_log(&outcome.history, tmp))?;
        atomic(&self.layout.checkpoint(phase), |tmp| outcome.model.save(tmp))
    }

    fn encode_phase(&mut self, phase: u8) -> Result<()> {
        let model = self.load_model(phase)?;
        let emb = encode_corpus(&model, &self.inputs()?.docs)?;
        atomic(&self.layout.embeddings(phase), |tmp| write_embeddings(&emb, tmp))
    }

    /// Embeddings for an ensemble member: the stage output when the model is a
    /// pipeline checkpoint, otherwise a fresh encoding.
    fn member_embeddings(&mut self, model_path: &Path, model: &EncoderModel) -> Result<EmbeddingMatrix> {
        for phase in [1u8, 2] {
            if model_path == self.layout.checkpoint(phase) && self.layout.embeddings(phase).exists() {
                return self.load_embeddings(phase);
            }
        }
        encode_corpus(model, &self.inputs()?.docs)
    }

    /// Ensemble rankings for `queries` under the configured members and weights.
    pub fn ensemble_lists(&mut self, queries: &[Query], k: usize) -> Result<Vec<RankedList>> {
        let index = self.load_index()?;
        let mut models = Vec::new();
        for m in self.cfg.ensemble.models.clone() {
            let path = if m.is_absolute() { m } else { self.layout.root.join(m) };
            let model = EncoderModel::load(&path)?;
            let emb = self.member_embeddings(&path, &model)?;
            if emb.ids() != index.doc_ids() {
                return Err(Error::Config(format!(
                    "embeddings for {} do not match the indexed corpus",
                    path.display()
                )));
            }
            models.push((model, emb));
        }
        let members: Vec<EnsembleMember<'_>> = models
            .iter()
            .map(|(model, embeddings)| EnsembleMember { model, embeddings })
            .collect();
        let e = &self.cfg.ensemble;
        queries
            .iter()
            .map(|q| {
                let sparse = index.score_all(&index.analyze(&q.text), SparseScorer::Bm25Plus);
                let scores =
                    ensemble_score(q, &members, &e.weights, e.alpha, &sparse, e.normalize_sparse)?;
                rank_from_scores(&q.id, &scores, index.doc_ids(), k)
            })
            .collect()
    }

    fn search_all(&mut self) -> Result<()> {
        let depth = self.cfg.run_depth;
        let index = self.load_index()?;
        let queries: Vec<Query> = self.inputs()?.eval_queries().into_iter().cloned().collect();
        for scorer in [SparseScorer::Bm25Plus, SparseScorer::Tfidf] {
            let lists = queries
                .iter()
                .map(|q| index.search(q, depth, scorer))
                .collect::<Result<Vec<_>>>()?;
            atomic(&self.layout.run(scorer.name()), |tmp| write_run(&lists, scorer.name(), tmp))?;
        }
        let phases: &[u8] = if self.cfg.phase2.is_some() { &[1, 2] } else { &[1] };
        for &phase in phases {
            let model = self.load_model(phase)?;
            let emb = self.load_embeddings(phase)?;
            let lists = queries
                .iter()
                .map(|q| search_dense(q, &model, &emb, depth))
                .collect::<Result<Vec<_>>>()?;
            let tag = format!("phase{phase}");
            atomic(&self.layout.run(&tag), |tmp| write_run(&lists, &tag, tmp))?;
        }
        let lists = self.ensemble_lists(&queries, depth)?;
        atomic(&self.layout.run("ensemble"), |tmp| write_run(&lists, "ensemble", tmp))
    }

    fn evaluate(&mut self) -> Result<PipelineReport> {
        let cutoffs = self.cfg.cutoffs.clone();
        let names = systems(&self.cfg);
        let layout = self.layout.clone();
        let inputs = self.inputs()?;
        let mut reports = BTreeMap::new();
        for system in names {
            let path = layout.run(system);
            require(&path, Stage::Search)?;
            let run = read_run(&path)?;
            reports.insert(system.to_string(), evaluate_run(&run, &inputs.qrels, &cutoffs)?);
        }
        let report = PipelineReport {
            train_queries: inputs.train_ids.len(),
            eval_queries: inputs.eval_ids.len(),
            systems: reports,
        };
        atomic(&layout.report(), |tmp| write_json(&report, tmp))?;
        Ok(report)
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn in_stage(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    }
}

/// Loads, validates and runs the whole pipeline, reusing valid artifacts.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<PipelineOutcome> {
    Pipeline::new(cfg)?.run()
}

/// Ids of the distinct systems present in a report, in display order.
pub fn report_systems(report: &PipelineReport) -> Vec<&str> {
    let order = ["bm25plus", "tfidf", "phase1", "phase2", "ensemble"];
    let present: BTreeSet<&str> = report.systems.keys().map(String::as_str).collect();
    let mut out: Vec<&str> = order.iter().copied().filter(|s| present.contains(s)).collect();
    out.extend(present.iter().copied().filter(|s| !order.contains(s)));
    out
}
