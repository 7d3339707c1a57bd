use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lexdense::corpus::{
    format_run, load_corpus, load_qrels, load_queries, read_run, write_embeddings, write_run, RankedList,
};
use lexdense::encoder::EncoderModel;
use lexdense::metrics::{evaluate_run, parse_cutoff_list};
use lexdense::pipeline::bench::{run_bench, BenchOptions};
use lexdense::pipeline::stages::{report_systems, Pipeline, Stage};
use lexdense::pipeline::synth::{generate, write_benchmark, SynthConfig};
use lexdense::pipeline::PipelineConfig;
use lexdense::retrieval::{encode_corpus, search_dense};
use lexdense::sparse::SparseScorer;
use lexdense::{Error, Result};

#[derive(Parser)]
#[command(name = "lexdense", version, about = "Two-phase sparse/dense retrieval pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's work dir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25+ inverted index.
    BuildIndex,
    /// Mine phase-1 negatives from the sparse index.
    MinePhase1,
    /// Train the phase-1 encoder.
    TrainPhase1,
    /// Mine phase-2 hard negatives with the phase-1 encoder.
    MinePhase2,
    /// Fine-tune the phase-1 encoder on hard negatives.
    TrainPhase2,
    /// Encode the corpus with a pipeline checkpoint, or any checkpoint via `--model`.
    Encode {
        /// Pipeline phase whose checkpoint is encoded.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        #[arg(long, requires = "out")]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search every query with a dense checkpoint or a sparse scorer.
    Search {
        #[arg(long, conflicts_with = "scorer")]
        model: Option<PathBuf>,
        /// bm25plus or tfidf.
        #[arg(long)]
        scorer: Option<SparseScorer>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Run file to write; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every query with the configured ensemble.
    Ensemble {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the config's qrels.
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Recall cutoffs `3,5,10`, or per metric `R=3,5;MRR=10;MAP=10;nDCG=10`.
        #[arg(long)]
        cutoffs: Option<String>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage, reusing valid artifacts, and print the comparison table.
    RunAll,
    /// Generate seeded synthetic benchmarks and run the pipeline on each.
    SynthBench {
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Only write the data files and configs.
        #[arg(long)]
        generate_only: bool,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = &g.workdir {
        cfg.paths.workdir = w.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_cutoffs(text: &str, base: &lexdense::metrics::Cutoffs) -> Result<lexdense::metrics::Cutoffs> {
    let mut c = base.clone();
    if !text.contains('=') {
        c.recall = parse_cutoff_list(text)?;
        c.validate()?;
        return Ok(c);
    }
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, ks) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad cutoff group {part:?}")))?;
        let ks = parse_cutoff_list(ks)?;
        match name.trim().to_ascii_lowercase().as_str() {
            "r" | "recall" => c.recall = ks,
            "mrr" => c.mrr = ks,
            "map" => c.map = ks,
            "ndcg" => c.ndcg = ks,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
    c.validate()?;
    Ok(c)
}

fn emit_run(lists: &[RankedList], tag: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_run(lists, tag, p),
        None => std::io::stdout()
            .write_all(format_run(lists, tag)?.as_bytes())
            .map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            }),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let stage = |s: Stage| -> Result<()> { Pipeline::new(load_config(g)?)?.run_stage(s) };
    match cli.command {
        Command::BuildIndex => stage(Stage::BuildIndex),
        Command::MinePhase1 => stage(Stage::MinePhase1),
        Command::TrainPhase1 => stage(Stage::TrainPhase1),
        Command::MinePhase2 => stage(Stage::MinePhase2),
        Command::TrainPhase2 => stage(Stage::TrainPhase2),
        Command::Encode { phase, model, out } => match (model, out) {
            (Some(model), Some(out)) => {
                let cfg = load_config(g)?;
                let docs = load_corpus(&cfg.paths.corpus)?;
                let m = EncoderModel::load(&model)?;
                write_embeddings(&encode_corpus(&m, &docs)?, &out)
            }
            _ if phase == 1 => stage(Stage::EncodePhase1),
            _ => stage(Stage::EncodePhase2),
        },
        Command::Search { model, scorer, k, out } => {
            let cfg = load_config(g)?;
            let queries = load_queries(&cfg.paths.queries)?;
            let mut p = Pipeline::new(cfg)?;
            let (lists, tag) = match (model, scorer) {
                (Some(path), _) => {
                    let m = EncoderModel::load(&path)?;
                    let docs = &p.inputs()?.docs;
                    let emb = encode_corpus(&m, docs)?;
                    let lists = queries
                        .queries()
                        .iter()
                        .map(|q| search_dense(q, &m, &emb, k))
                        .collect::<Result<Vec<_>>>()?;
                    (lists, "dense")
                }
                (None, s) => {
                    let s = s.unwrap_or(SparseScorer::Bm25Plus);
                    let index = p.load_index()?;
                    let lists = queries
                        .queries()
                        .iter()
                        .map(|q| index.search(q, k, s))
                        .collect::<Result<Vec<_>>>()?;
                    (lists, s.name())
                }
            };
            emit_run(&lists, tag, out.as_deref())
        }
        Command::Ensemble { k, out } => {
            let cfg = load_config(g)?;
            let queries = load_queries(&cfg.paths.queries)?;
            let mut p = Pipeline::new(cfg)?;
            let lists = p.ensemble_lists(queries.queries(), k)?;
            emit_run(&lists, "ensemble", out.as_deref())
        }
        Command::Eval { run, qrels, cutoffs, json } => {
            let cfg = load_config(g)?;
            let cut = match &cutoffs {
                Some(s) => parse_cutoffs(s, &cfg.cutoffs)?,
                None => cfg.cutoffs.clone(),
            };
            let qrels = load_qrels(qrels.as_ref().unwrap_or(&cfg.paths.qrels))?.qrels;
            let lists = read_run(&run)?;
            let report = evaluate_run(&lists, &qrels, &cut)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?
                );
            } else {
                let name = run.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
                print!("{}", report.to_table(name));
            }
            Ok(())
        }
        Command::RunAll => {
            let mut p = Pipeline::new(load_config(g)?)?;
            let outcome = p.run()?;
            for s in &outcome.reused {
                log::info!("reused {}", s.name());
            }
            let r = &outcome.report;
            let rows: Vec<(&str, &lexdense::metrics::MetricReport)> = report_systems(r)
                .into_iter()
                .map(|s| (s, &r.systems[s]))
                .collect();
            println!(
                "{} train / {} eval queries",
                r.train_queries, r.eval_queries
            );
            print!("{}", lexdense::metrics::comparison_table(&rows));
            Ok(())
        }
        Command::SynthBench {
            out,
            seeds,
            docs,
            queries,
            generate_only,
        } => {
            let overrides = match &g.config {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?,
                None => String::new(),
            };
            if generate_only && seeds.len() == 1 && g.config.is_none() {
                // plain data generation into `out`
                let bench = generate(&SynthConfig::new(seeds[0], docs, queries))?;
                std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                write_benchmark(&bench, &out)?;
                return Ok(());
            }
            let summary = run_bench(&BenchOptions {
                out_dir: out,
                seeds,
                synth: SynthConfig::new(0, docs, queries),
                overrides,
                generate_only,
            })?;
            if !generate_only {
                print!(
                    "{}",
                    summary.table(
                        &["bm25plus", "tfidf", "phase1", "phase2", "ensemble"],
                        &["R@10", "MRR@10"]
                    )
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.global.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
