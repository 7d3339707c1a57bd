//! Seeded synthetic retrieval benchmark.
//!
//! A global table of concepts, each with a surface word and a synonym.
//! Topics are overlapping subsets of the table; a document is a combination
//! of its topic's concepts written mostly as words, so the concept set
//! identifies it. Queries restate some of the target's concepts mostly
//! through synonyms, which leaves little exact overlap with the target.
//! Each query's words are also planted into documents of other topics, so
//! lexical scoring ranks those traps highly.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::{write_corpus, write_qrels, write_queries, Document, Query, RelevanceJudgments};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub n_queries: usize,
    pub n_topics: usize,
    /// Size of the global concept table.
    pub concepts: usize,
    pub concepts_per_topic: usize,
    pub doc_concepts: usize,
    pub doc_fillers: usize,
    pub filler_vocab: usize,
    pub query_concepts: usize,
    pub query_fillers: usize,
    /// Probability that a query states a concept through its synonym.
    pub query_synonym_rate: f64,
    /// Probability that a document states a concept through its synonym.
    pub doc_synonym_rate: f64,
    pub traps_per_query: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_docs: usize, n_queries: usize) -> Self {
        Self {
            seed,
            n_docs,
            n_queries,
            n_topics: (n_docs / 100).max(2),
            concepts: 200,
            concepts_per_topic: 20,
            doc_concepts: 8,
            doc_fillers: 6,
            filler_vocab: 200,
            query_concepts: 4,
            query_fillers: 1,
            query_synonym_rate: 0.8,
            doc_synonym_rate: 0.1,
            traps_per_query: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_docs < 10 * self.n_queries {
            return Err(Error::Config(format!(
                "need n_queries >= 1 and n_docs >= 10 * n_queries, got {} docs / {} queries",
                self.n_docs, self.n_queries
            )));
        }
        if self.n_topics < 2 || self.n_topics > self.n_docs {
            return Err(Error::Config(format!("bad topic count {}", self.n_topics)));
        }
        if self.query_concepts == 0
            || self.query_concepts > self.doc_concepts
            || self.doc_concepts > self.concepts_per_topic
            || self.concepts_per_topic > self.concepts
        {
            return Err(Error::Config(
                "need 1 <= query_concepts <= doc_concepts <= concepts_per_topic <= concepts".into(),
            ));
        }
        if self.filler_vocab == 0 && (self.doc_fillers > 0 || self.query_fillers > 0) {
            return Err(Error::Config("fillers requested from an empty filler vocabulary".into()));
        }
        for r in [self.query_synonym_rate, self.doc_synonym_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("synonym rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub docs: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: RelevanceJudgments,
    /// The concept table as `(word, synonym)` pairs.
    pub synonyms: Vec<(String, String)>,
}

struct Concept {
    word: String,
    synonym: String,
}

impl Concept {
    fn render(&self, rng: &mut ChaCha20Rng, synonym_rate: f64) -> String {
        if rng.gen_bool(synonym_rate) {
            self.synonym.clone()
        } else {
            self.word.clone()
        }
    }
}

fn pseudo_word(rng: &mut ChaCha20Rng, used: &mut HashSet<String>) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    loop {
        let syllables = rng.gen_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn sample(rng: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut used = HashSet::new();
    let table: Vec<Concept> = (0..cfg.concepts)
        .map(|_| Concept {
            word: pseudo_word(&mut rng, &mut used),
            synonym: pseudo_word(&mut rng, &mut used),
        })
        .collect();
    let fillers: Vec<String> = (0..cfg.filler_vocab)
        .map(|_| pseudo_word(&mut rng, &mut used))
        .collect();
    let topics: Vec<Vec<usize>> = (0..cfg.n_topics)
        .map(|_| sample(&mut rng, cfg.concepts, cfg.concepts_per_topic))
        .collect();

    let topic_of: Vec<usize> = (0..cfg.n_docs).map(|i| i % cfg.n_topics).collect();
    let mut doc_concepts: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_docs);
    let mut doc_words: Vec<Vec<String>> = Vec::with_capacity(cfg.n_docs);
    for &t in &topic_of {
        let picked: Vec<usize> = sample(&mut rng, cfg.concepts_per_topic, cfg.doc_concepts)
            .into_iter()
            .map(|i| topics[t][i])
            .collect();
        let mut words: Vec<String> = picked
            .iter()
            .map(|&c| table[c].render(&mut rng, cfg.doc_synonym_rate))
            .collect();
        words.extend((0..cfg.doc_fillers).map(|_| fillers[rng.gen_range(0..fillers.len())].clone()));
        words.shuffle(&mut rng);
        doc_concepts.push(picked);
        doc_words.push(words);
    }

    let targets = sample(&mut rng, cfg.n_docs, cfg.n_queries);
    let target_set: BTreeSet<usize> = targets.iter().copied().collect();
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut qrels = RelevanceJudgments::new();
    let doc_width = cfg.n_docs.to_string().len();
    let query_width = cfg.n_queries.to_string().len();
    let doc_id = |i: usize| format!("d{i:0doc_width$}");
    for (qi, &d) in targets.iter().enumerate() {
        let t = topic_of[d];
        let mut chosen = doc_concepts[d].clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(cfg.query_concepts);
        let content: Vec<String> = chosen
            .iter()
            .map(|&c| table[c].render(&mut rng, cfg.query_synonym_rate))
            .collect();
        let mut words = content.clone();
        words.extend(
            (0..cfg.query_fillers).map(|_| fillers[rng.gen_range(0..fillers.len())].clone()),
        );
        words.shuffle(&mut rng);
        let qid = format!("q{:0query_width$}", qi + 1);
        queries.push(Query {
            id: qid.clone(),
            text: words.join(" "),
        });
        qrels.insert(&qid, &doc_id(d), 1)?;

        let mut planted = 0;
        let mut attempts = 0;
        while planted < cfg.traps_per_query && attempts < 100 * cfg.n_docs {
            attempts += 1;
            let j = rng.gen_range(0..cfg.n_docs);
            if topic_of[j] == t || target_set.contains(&j) {
                continue;
            }
            doc_words[j].extend(content.iter().cloned());
            planted += 1;
        }
    }

    let docs = doc_words
        .into_iter()
        .enumerate()
        .map(|(i, words)| Document {
            id: doc_id(i),
            text: words.join(" "),
            title: None,
        })
        .collect();
    Ok(SyntheticBenchmark {
        docs,
        queries,
        qrels,
        synonyms: table.into_iter().map(|c| (c.word, c.synonym)).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

/// Writes `corpus.jsonl`, `queries.jsonl` and `qrels.tsv` into `dir`.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    let files = SynthFiles {
        corpus: dir.join("corpus.jsonl"),
        queries: dir.join("queries.jsonl"),
        qrels: dir.join("qrels.tsv"),
    };
    write_corpus(&bench.docs, &files.corpus)?;
    write_queries(&bench.queries, &files.queries)?;
    write_qrels(&bench.qrels, &files.qrels)?;
    Ok(files)
}
