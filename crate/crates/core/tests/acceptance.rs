//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::gradcheck::{max_gradient_error, small_model, BUCKETS, DIM};
use common::{gen, oracles};
use lexdense::corpus::{load_qrels, load_queries, Document, DocumentCollection, Query, RankedList, RelevanceJudgments};
use lexdense::encoder::{EncoderConfig, EncoderModel};
use lexdense::metrics::{evaluate_run, Cutoffs, MetricKind};
use lexdense::mining::{mine_global_all, mine_hard_all, read_mined, MiningConfig};
use lexdense::pipeline::bench::{bench_config_text, run_bench, BenchOptions, BenchSummary};
use lexdense::pipeline::stages::Layout;
use lexdense::pipeline::synth::{generate, write_benchmark, SynthConfig};
use lexdense::retrieval::{encode_corpus, ensemble_score, rank_from_scores, search_dense, EnsembleMember};
use lexdense::sparse::{Bm25Params, SparseIndex, SparseScorer};
use lexdense::text::TokenizerConfig;
use lexdense::trainer::{assemble_batch, infonce_loss, TrainingExample};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&Ctx) -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Bench {
    dir: PathBuf,
    summary: BenchSummary,
    elapsed: Duration,
}

struct Ctx {
    root: tempfile::TempDir,
    bench: OnceCell<Result<Bench, String>>,
}

impl Ctx {
    fn bench(&self) -> Result<&Bench, String> {
        self.bench
            .get_or_init(|| {
                let dir = self.root.path().join("synth");
                let start = Instant::now();
                let summary = run_bench(&BenchOptions {
                    out_dir: dir.clone(),
                    seeds: (1..=5).collect(),
                    synth: SynthConfig::new(0, 2000, 200),
                    overrides: String::new(),
                    generate_only: false,
                })
                .map_err(|e| format!("synth-bench failed: {e}"))?;
                Ok(Bench {
                    dir,
                    summary,
                    elapsed: start.elapsed(),
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

// 1 -------------------------------------------------------------------------

fn gradient(_: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let e = max_gradient_error(1000 + seed, 1.0, 1e-4);
        ensure(e <= 1e-4, || format!("instance {seed}: relative error {e:.3e}"))?;
        worst = worst.max(e);
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:.1?}"))?;
    Ok(format!("100 instances (d={DIM}, V={BUCKETS}, tau=1, h=1e-4), max rel err {worst:.2e}, {t:.1?}"))
}

// 2 -------------------------------------------------------------------------

fn random_model(rng: &mut ChaCha20Rng) -> EncoderModel {
    let mut m = small_model(rng.gen());
    if rng.gen_bool(0.5) {
        for r in 0..DIM {
            for k in 0..BUCKETS {
                m.set_weight(r, k, rng.gen_range(-1.0..1.0));
            }
        }
    }
    m
}

/// Every positive is judged for its own query, plus random extra judgments
/// (some of grade 0) between queries and batch documents.
fn batch_qrels(rng: &mut ChaCha20Rng, examples: &[TrainingExample]) -> RelevanceJudgments {
    let mut q = RelevanceJudgments::new();
    let all: Vec<&String> = examples
        .iter()
        .flat_map(|e| std::iter::once(&e.positive).chain(&e.negatives))
        .collect();
    for e in examples {
        q.insert(&e.query.id, &e.positive, 1).unwrap();
        for _ in 0..rng.gen_range(0..3) {
            let d = all[rng.gen_range(0..all.len())];
            if d != &e.positive {
                q.insert(&e.query.id, d, rng.gen_range(0..3)).unwrap();
            }
        }
    }
    q
}

fn oracle_mask(examples: &[TrainingExample], qrels: &RelevanceJudgments) -> (Vec<Vec<bool>>, Vec<usize>) {
    let c = examples[0].negatives.len() + 1;
    let cols: Vec<&str> = examples
        .iter()
        .flat_map(|e| std::iter::once(e.positive.as_str()).chain(e.negatives.iter().map(String::as_str)))
        .collect();
    let pos: Vec<usize> = (0..examples.len()).map(|i| i * c).collect();
    let masked = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            cols.iter()
                .enumerate()
                .map(|(j, d)| {
                    j != pos[i]
                        && qrels
                            .grades(&e.query.id)
                            .and_then(|g| g.get(*d))
                            .is_some_and(|&g| g > 0)
                })
                .collect()
        })
        .collect();
    (masked, pos)
}

fn oracle_sims(model: &EncoderModel, docs: &DocumentCollection, examples: &[TrainingExample]) -> Vec<Vec<f64>> {
    let p: Vec<Vec<f64>> = examples
        .iter()
        .flat_map(|e| std::iter::once(&e.positive).chain(&e.negatives))
        .map(|id| oracles::embed(model, &docs.get(id).unwrap().text, "passage:"))
        .collect();
    examples
        .iter()
        .map(|e| {
            let q = oracles::embed(model, &e.query.text, "query:");
            p.iter().map(|pv| pv.iter().zip(&q).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

fn infonce(_: &Ctx) -> Outcome {
    let mut rng = gen::rng(2);
    let vocab = gen::vocab(60);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let docs = gen::corpus(&mut rng, 30, &vocab, 10);
        let b = rng.gen_range(1..=4);
        let c = rng.gen_range(2..=6);
        let tau = rng.gen_range(0.05..2.0);
        let examples = gen::examples(&mut rng, &docs, &vocab, b, c);
        let model = random_model(&mut rng);
        let qrels = batch_qrels(&mut rng, &examples);
        let batch = assemble_batch(&examples, &model, &docs, Some(&qrels)).map_err(|e| e.to_string())?;
        let got = infonce_loss(&batch, tau).map_err(|e| e.to_string())?;
        let (masked, pos) = oracle_mask(&examples, &qrels);
        let want = oracles::softmax_ce(&oracle_sims(&model, &docs, &examples), &masked, &pos, tau);
        let err = (got - want).abs();
        ensure(err <= 1e-10, || format!("batch {i} (B={b}, C={c}, tau={tau:.3}): {got} vs {want}"))?;
        worst = worst.max(err);
    }

    // identical documents give equal similarities in every row
    for i in 0..100 {
        let n = 20;
        let docs = DocumentCollection::new(
            (0..n)
                .map(|j| Document {
                    id: format!("d{j}"),
                    text: "same words in every passage".into(),
                    title: None,
                })
                .collect(),
        )
        .unwrap();
        let b = rng.gen_range(1..=4);
        let c = rng.gen_range(2..=5);
        let examples = gen::examples(&mut rng, &docs, &vocab, b, c);
        let model = random_model(&mut rng);
        let qrels = batch_qrels(&mut rng, &examples);
        let tau = rng.gen_range(0.05..2.0);
        let batch = assemble_batch(&examples, &model, &docs, Some(&qrels)).map_err(|e| e.to_string())?;
        let got = infonce_loss(&batch, tau).map_err(|e| e.to_string())?;
        let (masked, _) = oracle_mask(&examples, &qrels);
        let want = masked
            .iter()
            .map(|row| (row.iter().filter(|m| !**m).count() as f64).ln())
            .sum::<f64>()
            / b as f64;
        ensure((got - want).abs() <= 1e-12, || {
            format!("equal-similarity batch {i}: loss {got} vs mean ln(m) {want}")
        })?;
    }
    Ok(format!("1000 random batches, max abs err {worst:.2e}; 100 equal-similarity batches exact"))
}

// 3 -------------------------------------------------------------------------

fn shape_law(_: &Ctx) -> Outcome {
    let mut rng = gen::rng(3);
    let vocab = gen::vocab(50);
    let docs = gen::corpus(&mut rng, 40, &vocab, 8);
    let model = small_model(3);
    let mut cases = 0;
    for b in 1..=4 {
        for c in 2..=8 {
            for _ in 0..5 {
                let ex = gen::examples(&mut rng, &docs, &vocab, b, c);
                let batch = assemble_batch(&ex, &model, &docs, None).map_err(|e| e.to_string())?;
                let s = batch.similarity_matrix();
                ensure(batch.shape() == (b, b * c), || format!("B={b} C={c}: shape {:?}", batch.shape()))?;
                ensure(s.len() == b && s.iter().all(|r| r.len() == b * c), || {
                    format!("B={b} C={c}: similarity matrix is not {b}x{}", b * c)
                })?;
                cases += 1;
            }
        }
    }

    // phase 2: hard negatives mined by a model, one query per batch
    let emb = encode_corpus(&model, &docs).unwrap();
    let queries = gen::queries(&mut rng, 10, &vocab, 4);
    let mut qrels = RelevanceJudgments::new();
    for q in &queries {
        qrels.insert(&q.id, &format!("d{}", rng.gen_range(0..40)), 1).unwrap();
    }
    let refs: Vec<&Query> = queries.iter().collect();
    for c in 2..=8 {
        let cfg = MiningConfig {
            a2: 20,
            phase2_docs_per_query: c,
            ..MiningConfig::default()
        };
        let mined = mine_hard_all(&refs, &qrels, &model, &emb, &cfg).map_err(|e| e.to_string())?;
        for e in &mined.examples {
            let batch = assemble_batch(std::slice::from_ref(e), &model, &docs, Some(&qrels))
                .map_err(|e| e.to_string())?;
            ensure(batch.shape() == (1, c), || format!("phase 2 C={c}: shape {:?}", batch.shape()))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} batches: B x (B*C) for B in 1..4, C in 2..8; 1 x C for phase 2"))
}

// 4 -------------------------------------------------------------------------

fn sparse_oracle(_: &Ctx) -> Outcome {
    let mut rng = gen::rng(4);
    let tok = TokenizerConfig::default();
    let mut lists = 0;
    for corpus_no in 0..50 {
        let n_docs = rng.gen_range(1..=500);
        let vocab = gen::vocab(rng.gen_range(10..300));
        let max_len = rng.gen_range(1..40);
        let docs = gen::corpus(&mut rng, n_docs, &vocab, max_len);
        let params = Bm25Params {
            k1: rng.gen_range(0.2..2.5),
            b: rng.gen_range(0.0..=1.0),
            delta: rng.gen_range(0.0..2.0),
        };
        let index = SparseIndex::build(&docs, &tok, params).map_err(|e| e.to_string())?;
        let zero = index
            .with_params(Bm25Params { delta: 0.0, ..params })
            .map_err(|e| e.to_string())?;
        let brute = oracles::BruteSparse::new(&docs, &tok);
        let n_queries = rng.gen_range(1..=50);
        let mut queries = gen::queries(&mut rng, n_queries, &vocab, 6);
        for q in queries.iter_mut().filter(|_| rng.gen_bool(0.1)) {
            q.text.push_str(" unseenword");
        }
        for q in &queries {
            let toks = index.analyze(&q.text);
            let k = if rng.gen_bool(0.1) { n_docs } else { rng.gen_range(1..=20) };
            for (scorer, want) in [
                (SparseScorer::Bm25Plus, brute.bm25plus(&toks, params.k1, params.b, params.delta)),
                (SparseScorer::Tfidf, brute.tfidf(&toks)),
            ] {
                let got = index.search(q, k, scorer).map_err(|e| e.to_string())?;
                let want = brute.top_k(&want, k);
                ensure(got.items.len() == want.len(), || {
                    format!("corpus {corpus_no} {} {:?}: {} vs {} results", q.id, scorer, got.items.len(), want.len())
                })?;
                for (r, ((gd, gs), (wd, ws))) in got.items.iter().zip(&want).enumerate() {
                    ensure(gd == wd && (gs - ws).abs() <= 1e-9, || {
                        format!("corpus {corpus_no} {} {scorer:?} rank {}: {gd} {gs} vs {wd} {ws}", q.id, r + 1)
                    })?;
                }
                lists += 1;
            }
            let got = zero.score_all(&toks, SparseScorer::Bm25Plus);
            let want = brute.bm25(&toks, params.k1, params.b);
            for (j, (g, w)) in got.iter().zip(&want).enumerate() {
                ensure((g - w).abs() <= 1e-12, || {
                    format!("corpus {corpus_no} {} doc {j}: delta=0 gives {g}, BM25 {w}", q.id)
                })?;
            }
        }
    }
    Ok(format!("50 corpora, {lists} top-k lists identical rank for rank; delta=0 equals BM25"))
}

// 5 -------------------------------------------------------------------------

fn list(qid: &str, docs: &[&str]) -> RankedList {
    let n = docs.len() as f64;
    RankedList::from_scores(
        qid,
        docs.iter().enumerate().map(|(i, d)| (d.to_string(), n - i as f64)).collect(),
        docs.len(),
    )
    .unwrap()
}

fn metrics(_: &Ctx) -> Outcome {
    let mut rng = gen::rng(5);
    let ks = vec![1, 2, 3, 5, 10, 20, 50];
    let cutoffs = Cutoffs {
        recall: ks.clone(),
        mrr: ks.clone(),
        map: ks.clone(),
        ndcg: ks,
    };
    let pool: Vec<String> = (0..40).map(|i| format!("d{i}")).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for run_no in 0..200 {
        let mut qrels = RelevanceJudgments::new();
        let mut run = Vec::new();
        for qi in 0..rng.gen_range(1..=12) {
            let qid = format!("q{qi}");
            let judged = rng.gen_range(0..=8);
            for d in pool.choose_multiple(&mut rng, judged) {
                qrels.insert(&qid, d, rng.gen_range(0..=3)).unwrap();
            }
            let len = rng.gen_range(1..=30);
            let ranking: Vec<&str> = pool.choose_multiple(&mut rng, len).map(String::as_str).collect();
            run.push(list(&qid, &ranking));
        }
        let report = evaluate_run(&run, &qrels, &cutoffs).map_err(|e| e.to_string())?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for l in &run {
            let empty = BTreeMap::new();
            let grades = qrels.grades(&l.query_id).unwrap_or(&empty);
            let ranking: Vec<&str> = l.doc_ids().collect();
            for m in cutoffs.metrics() {
                let want = match m.kind {
                    MetricKind::Recall => oracles::recall(&ranking, grades, m.k),
                    MetricKind::Mrr => oracles::mrr(&ranking, grades, m.k),
                    MetricKind::Map => oracles::map(&ranking, grades, m.k),
                    MetricKind::Ndcg => oracles::ndcg(&ranking, grades, m.k),
                };
                let label = m.label();
                let got = report.per_query.get(&l.query_id).and_then(|r| r.get(&label)).copied();
                match (got, want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => {
                        ensure((g - w).abs() <= 1e-9, || {
                            format!("run {run_no} {} {label}: {g} vs {w}", l.query_id)
                        })?;
                        worst = worst.max((g - w).abs());
                        let e = sums.entry(label).or_default();
                        e.0 += w;
                        e.1 += 1;
                        checked += 1;
                    }
                    (g, w) => return Err(format!("run {run_no} {} {label}: {g:?} vs {w:?}", l.query_id)),
                }
            }
        }
        for (label, (s, n)) in sums {
            let g = report.get(&label).unwrap_or(f64::NAN);
            ensure((g - s / n as f64).abs() <= 1e-9, || format!("run {run_no} mean {label}: {g} vs {}", s / n as f64))?;
        }
    }

    let one = |grades: &[(&str, u32)], ranking: &[&str], label: &str| -> f64 {
        let mut q = RelevanceJudgments::new();
        for (d, g) in grades {
            q.insert("q", d, *g).unwrap();
        }
        evaluate_run(&[list("q", ranking)], &q, &Cutoffs::default())
            .unwrap()
            .get(label)
            .unwrap()
    };
    let map = one(&[("d1", 1), ("d2", 1)], &["d1", "x", "d2"], "MAP@10");
    ensure((map - 5.0 / 6.0).abs() <= 1e-5, || format!("hand MAP {map}, expected 5/6"))?;
    let ndcg = one(&[("d1", 1), ("d2", 1)], &["x", "d1", "d2"], "nDCG@10");
    ensure((ndcg - 0.69343).abs() <= 1e-5, || format!("hand nDCG {ndcg}, expected 0.69343"))?;
    Ok(format!(
        "200 runs, {checked} values, max abs err {worst:.1e}; hand MAP {map:.5}, nDCG {ndcg:.5}"
    ))
}

// 6 -------------------------------------------------------------------------

fn order(scores: &[f64], ids: &[String]) -> Vec<String> {
    rank_from_scores("q", scores, ids, ids.len())
        .unwrap()
        .doc_ids()
        .map(str::to_string)
        .collect()
}

fn ensemble(_: &Ctx) -> Outcome {
    let mut rng = gen::rng(6);
    let vocab = gen::vocab(120);
    let tok = TokenizerConfig::default();
    let mut rankings = 0;
    for cfg_no in 0..100 {
        let n_docs = rng.gen_range(5..120);
        let docs = gen::corpus(&mut rng, n_docs, &vocab, 15);
        let index = SparseIndex::build(&docs, &tok, Bm25Params::default()).unwrap();
        let models: Vec<EncoderModel> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let mut m = EncoderModel::init(
                    EncoderConfig {
                        dim: rng.gen_range(2..16),
                        vocab_buckets: rng.gen_range(16..256),
                        ..EncoderConfig::default()
                    },
                    rng.gen(),
                )
                .unwrap();
                if rng.gen_bool(0.5) {
                    for r in 0..m.dim() {
                        for k in 0..m.vocab_buckets() {
                            m.set_weight(r, k, rng.gen_range(-1.0..1.0));
                        }
                    }
                }
                m
            })
            .collect();
        let embs: Vec<_> = models.iter().map(|m| encode_corpus(m, &docs).unwrap()).collect();
        let members: Vec<EnsembleMember> = models
            .iter()
            .zip(&embs)
            .map(|(model, embeddings)| EnsembleMember { model, embeddings })
            .collect();
        let ids: Vec<String> = docs.ids().map(str::to_string).collect();
        let weights: Vec<f64> = members.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) };
        let normalize = rng.gen_bool(0.5);
        let lambda = if rng.gen_bool(0.5) { rng.gen_range(0.01..1.0) } else { rng.gen_range(1.0..100.0) };
        let scaled: Vec<f64> = weights.iter().map(|w| w * lambda).collect();

        for q in gen::queries(&mut rng, 5, &vocab, 5) {
            let sparse = index.score_all(&index.analyze(&q.text), SparseScorer::Bm25Plus);
            let single = ensemble_score(&q, &members[..1], &[1.0], 0.0, &sparse, false).unwrap();
            let got = rank_from_scores(&q.id, &single, &ids, n_docs).unwrap();
            let want = search_dense(&q, &models[0], &embs[0], n_docs).unwrap();
            ensure(got == want, || format!("config {cfg_no} {}: single model with alpha=0 differs from dense", q.id))?;

            let base = ensemble_score(&q, &members, &weights, alpha, &sparse, normalize).unwrap();
            let big = ensemble_score(&q, &members, &scaled, alpha * lambda, &sparse, normalize).unwrap();
            ensure(order(&base, &ids) == order(&big, &ids), || {
                format!("config {cfg_no} {}: scaling by {lambda} changed the ranking", q.id)
            })?;
            rankings += 1;
        }
    }
    Ok(format!("100 configurations, {rankings} queries: identity and scale invariance hold"))
}

// 7 -------------------------------------------------------------------------

fn leaks(examples: &[TrainingExample], qrels: &RelevanceJudgments) -> usize {
    examples
        .iter()
        .filter(|e| e.negatives.iter().any(|n| qrels.is_relevant(&e.query.id, n)))
        .count()
}

fn mining(ctx: &Ctx) -> Outcome {
    let mut rng = gen::rng(7);
    let vocab = gen::vocab(80);
    let tok = TokenizerConfig::default();
    let (mut sets, mut total, mut bad) = (0, 0, 0);
    for _ in 0..40 {
        let n_docs = rng.gen_range(20..200);
        let docs = gen::corpus(&mut rng, n_docs, &vocab, 12);
        let ids: Vec<String> = docs.ids().map(str::to_string).collect();
        let n_queries = rng.gen_range(1..20);
        let queries = gen::queries(&mut rng, n_queries, &vocab, 4);
        let mut qrels = RelevanceJudgments::new();
        for q in &queries {
            let judged = rng.gen_range(0..=6);
            for d in ids.choose_multiple(&mut rng, judged) {
                qrels.insert(&q.id, d, rng.gen_range(0..=2)).unwrap();
            }
        }
        let a1 = rng.gen_range(1..=40);
        let a2 = rng.gen_range(1..=40);
        let cfg = MiningConfig {
            a1,
            per_query_negatives: rng.gen_range(0..=a1),
            a2,
            phase2_docs_per_query: rng.gen_range(2..=a2 + 1),
            seed: rng.gen(),
        };
        let refs: Vec<&Query> = queries.iter().collect();
        let index = SparseIndex::build(&docs, &tok, Bm25Params::default()).unwrap();
        let p1 = mine_global_all(&refs, &qrels, &index, &cfg).map_err(|e| e.to_string())?;
        let model = random_model(&mut rng);
        let emb = encode_corpus(&model, &docs).unwrap();
        let p2 = mine_hard_all(&refs, &qrels, &model, &emb, &cfg).map_err(|e| e.to_string())?;
        for set in [&p1.examples, &p2.examples] {
            sets += 1;
            total += set.len();
            bad += leaks(set, &qrels);
        }
    }

    let bench = ctx.bench()?;
    for seed in 1..=5 {
        let dir = bench.dir.join(format!("seed-{seed}"));
        let files = (
            load_queries(dir.join("queries.jsonl")).map_err(|e| e.to_string())?,
            load_qrels(dir.join("qrels.tsv")).map_err(|e| e.to_string())?.qrels,
        );
        let layout = Layout::new(dir.join("work"));
        for phase in [1, 2] {
            let ex = read_mined(layout.mined(phase), &files.0).map_err(|e| e.to_string())?;
            sets += 1;
            total += ex.len();
            bad += leaks(&ex, &files.1);
        }
    }
    ensure(bad == 0, || format!("{bad} of {total} examples have a positive among the negatives"))?;
    Ok(format!("{sets} mined datasets, {total} examples, none with a positive among negatives"))
}

// 8 -------------------------------------------------------------------------

fn two_phase(ctx: &Ctx) -> Outcome {
    let bench = ctx.bench()?;
    let s = &bench.summary;
    let med = |sys: &str, label: &str| s.median(sys, label).ok_or_else(|| format!("no {label} for {sys}"));
    let bm25 = med("bm25plus", "R@10")?;
    let p1r = med("phase1", "R@10")?;
    let p1m = med("phase1", "MRR@10")?;
    let p2m = med("phase2", "MRR@10")?;
    println!("{}", s.table(&["bm25plus", "tfidf", "phase1", "phase2", "ensemble"], &["R@10", "MRR@10"]));
    let detail = format!(
        "median R@10 phase1 {:.2} vs bm25plus {:.2}; MRR@10 phase2 {:.2} vs phase1 {:.2}; {:.1?}",
        p1r * 100.0,
        bm25 * 100.0,
        p2m * 100.0,
        p1m * 100.0,
        bench.elapsed
    );
    ensure(p1r >= bm25, || format!("(a) fails: {detail}"))?;
    ensure(p2m >= p1m, || format!("(b) fails: {detail}"))?;
    ensure(bench.elapsed <= Duration::from_secs(300), || format!("too slow: {detail}"))?;
    Ok(detail)
}

// 9 -------------------------------------------------------------------------

fn run_cli(conf: &Path, workdir: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lexdense"))
        .arg("--config")
        .arg(conf)
        .arg("--workdir")
        .arg(workdir)
        .args(["--single-thread", "run-all"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("run-all exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })?;
    std::fs::read(Layout::new(workdir).report()).map_err(|e| e.to_string())
}

fn determinism(ctx: &Ctx) -> Outcome {
    let dir = ctx.root.path().join("determinism");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let bench = generate(&SynthConfig::new(1, 2000, 200)).map_err(|e| e.to_string())?;
    write_benchmark(&bench, &dir).map_err(|e| e.to_string())?;
    let conf = dir.join("pipeline.conf");
    std::fs::write(&conf, bench_config_text(1, "")).map_err(|e| e.to_string())?;
    let a = run_cli(&conf, &dir.join("a"))?;
    let b = run_cli(&conf, &dir.join("b"))?;
    ensure(a == b, || "report.json differs between runs".into())?;
    Ok(format!("two runs, report.json byte-identical ({} bytes)", a.len()))
}

fn main() {
    let ctx = Ctx {
        root: tempfile::tempdir().expect("temp dir"),
        bench: OnceCell::new(),
    };
    let criteria: [Criterion; 9] = [
        ("gradient vs finite differences", gradient),
        ("InfoNCE vs softmax oracle", infonce),
        ("batch shape law", shape_law),
        ("sparse scoring vs brute force", sparse_oracle),
        ("metrics vs brute force", metrics),
        ("ensemble identities", ensemble),
        ("mining excludes positives", mining),
        ("two-phase ordering on synth-bench", two_phase),
        ("run-all determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&ctx)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let t = start.elapsed();
        match res {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{t:.1?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why} [{t:.1?}]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
