//! Corpora, queries, relevance judgments, run files and embedding matrices.
//!
//! File formats:
//! - corpus / queries: JSONL, `{"id": ..., "text": ..., "title": ...}`
//! - qrels: TREC `qid 0 docid grade` (tab or space separated)
//! - runs: TREC `qid Q0 docid rank score tag`, score with 6 decimals
//! - embeddings: `EMB1` binary, or JSONL `{"id": ..., "vec": [...]}`

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};

/// Maximum allowed deviation of an embedding row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// An ordered, id-unique set of documents. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct DocumentCollection {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentCollection {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.id.is_empty() {
                return Err(Error::EmptyId);
            }
            if d.text.trim().is_empty() {
                return Err(Error::EmptyText(d.id.clone()));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }
}

/// An ordered, id-unique set of queries.
#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    queries: Vec<Query>,
    by_id: HashMap<String, usize>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if q.id.is_empty() {
                return Err(Error::EmptyId);
            }
            if by_id.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        Ok(Self { queries, by_id })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn get(&self, id: &str) -> Option<&Query> {
        self.by_id.get(id).map(|&i| &self.queries[i])
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads non-blank JSONL lines as `T`, reporting 1-based line numbers on failure.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<DocumentCollection> {
    DocumentCollection::new(read_jsonl(path.as_ref())?)
}

pub fn write_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), docs)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    QuerySet::new(read_jsonl(path.as_ref())?)
}

pub fn write_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), queries)
}

/// Graded relevance labels, query id -> doc id -> grade. A grade > 0 means relevant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceJudgments {
    entries: BTreeMap<String, BTreeMap<String, u32>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, returning `true` when it replaced an earlier one.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<bool> {
        if query_id.is_empty() || doc_id.is_empty() {
            return Err(Error::EmptyId);
        }
        Ok(self
            .entries
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
            .is_some())
    }

    pub fn grades(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.entries.get(query_id)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.entries
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id) > 0
    }

    /// Relevant doc ids for a query in ascending id order.
    pub fn positives(&self, query_id: &str) -> Vec<&str> {
        self.entries
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.entries.iter().flat_map(|(q, m)| {
            m.iter()
                .map(move |(d, &g)| (q.as_str(), d.as_str(), g))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedQrels {
    pub qrels: RelevanceJudgments,
    /// Number of (query, doc) lines that overwrote an earlier line.
    pub overwrites: usize,
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<LoadedQrels> {
    let path = path.as_ref();
    let mut qrels = RelevanceJudgments::new();
    let mut overwrites = 0;
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("non-integer grade {:?}", cols[3])))?;
        if grade < 0 {
            return Err(Error::parse(path, i + 1, format!("negative grade {grade}")));
        }
        let grade = u32::try_from(grade)
            .map_err(|_| Error::parse(path, i + 1, format!("grade {grade} out of range")))?;
        if qrels.insert(cols[0], cols[2], grade)? {
            overwrites += 1;
        }
    }
    if overwrites > 0 {
        log::warn!("{}: {overwrites} duplicate qrels lines overwritten", path.display());
    }
    Ok(LoadedQrels { qrels, overwrites })
}

pub fn write_qrels(qrels: &RelevanceJudgments, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for (q, d, g) in qrels.iter() {
        writeln!(w, "{q}\t0\t{d}\t{g}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Total order used for every ranking: score descending, then doc id ascending.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Ranked retrieval output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts `scored` under [`rank_order`] and keeps the first `k`.
    pub fn from_scores(
        query_id: impl Into<String>,
        mut scored: Vec<(String, f64)>,
        k: usize,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if let Some((d, _)) = scored.iter().find(|(_, s)| s.is_nan()) {
            return Err(Error::NonFinite(format!("NaN score for {query_id}/{d}")));
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        let list = Self {
            query_id,
            items: scored,
        };
        list.check_unique()?;
        Ok(list)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.items.len());
        for (d, _) in &self.items {
            if !seen.insert(d.as_str()) {
                return Err(Error::DuplicateId(d.clone()));
            }
        }
        Ok(())
    }

    /// Checks the sort, tie and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        for (d, s) in &self.items {
            if s.is_nan() {
                return Err(Error::NonFinite(format!("NaN score for {}/{d}", self.query_id)));
            }
        }
        if self
            .items
            .windows(2)
            .any(|w| rank_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::Format(format!(
                "ranked list for {} is not in (score desc, id asc) order",
                self.query_id
            )));
        }
        self.check_unique()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Renders lists in the six-column TREC run format.
pub fn format_run(lists: &[RankedList], tag: &str) -> Result<String> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for l in lists {
        l.validate()?;
        for (rank, (doc, score)) in l.items.iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {} {} {:.6} {}", l.query_id, doc, rank + 1, score, tag);
        }
    }
    Ok(out)
}

pub fn write_run(lists: &[RankedList], tag: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_run(lists, tag)?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a TREC run. Lists come back in first-appearance query order with
/// items ordered by the rank column.
pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad score {:?}", cols[4])))?;
        if score.is_nan() {
            return Err(Error::parse(path, i + 1, "NaN score"));
        }
        let q = cols[0].to_string();
        if !rows.contains_key(&q) {
            order.push(q.clone());
        }
        rows.entry(q).or_default().push((rank, cols[2].to_string(), score));
    }
    order
        .into_iter()
        .map(|q| {
            let mut r = rows.remove(&q).unwrap_or_default();
            r.sort_by_key(|(rank, _, _)| *rank);
            let list = RankedList {
                query_id: q,
                items: r.into_iter().map(|(_, d, s)| (d, s)).collect(),
            };
            list.check_unique()?;
            Ok(list)
        })
        .collect()
}

/// Row-major matrix of unit-norm f32 embeddings keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        })
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        let id = id.into();
        check_norm(&id, row)?;
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }
}

fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn check_norm(id: &str, row: &[f32]) -> Result<()> {
    let norm = l2_norm(row);
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NormViolation {
            id: id.to_string(),
            norm,
        });
    }
    Ok(())
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for (id, row) in m.rows() {
        check_norm(id, row)?;
    }
    let io = |e| Error::io(path, e);
    let count = u32::try_from(m.len()).map_err(|_| Error::Format("too many rows".into()))?;
    let dim = u32::try_from(m.dim).map_err(|_| Error::Format("dim too large".into()))?;
    let mut w = LeWriter::new(create(path)?);
    w.bytes(EMB_MAGIC).map_err(io)?;
    w.u32(dim).map_err(io)?;
    w.u32(count).map_err(io)?;
    for (id, row) in m.rows() {
        w.short_str(id).map_err(io)?;
        for &x in row {
            w.f32(x).map_err(io)?;
        }
    }
    w.into_inner().flush().map_err(io)
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: String,
    vec: Vec<f32>,
}

/// JSONL fallback writer.
pub fn write_embeddings_jsonl(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<JsonRow> = m
        .rows()
        .map(|(id, v)| JsonRow {
            id: id.to_string(),
            vec: v.to_vec(),
        })
        .collect();
    write_jsonl(path.as_ref(), &rows)
}

/// Reads either the binary `EMB1` format or the JSONL fallback, by sniffing the first bytes.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMB_MAGIC) {
        return decode_binary(&bytes);
    }
    if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        let rows: Vec<JsonRow> = read_jsonl(path)?;
        let dim = rows.first().map(|r| r.vec.len()).ok_or_else(|| {
            Error::Format("JSONL embedding file has no rows; dim unknown".into())
        })?;
        let mut m = EmbeddingMatrix::new(dim)?;
        for r in rows {
            m.push(r.id, &r.vec)?;
        }
        return Ok(m);
    }
    Err(Error::Format(format!("{}: missing EMB1 magic", path.display())))
}

fn decode_binary(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = LeReader::new(&bytes[EMB_MAGIC.len()..]);
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut m = EmbeddingMatrix::new(dim)?;
    let mut row = vec![0f32; dim];
    for _ in 0..count {
        let id = r.short_str()?;
        for x in row.iter_mut() {
            *x = r.f32()?;
        }
        m.push(id, &row)?;
    }
    r.expect_end()?;
    Ok(m)
}
