//! Two-stage knowledge retrieval: BM25 over an inverted index picks the top
//! `M` candidates, then an inner product between the averaged query
//! embedding and each candidate's knowledge embedding keeps the top `N`.
//!
//! Both stages sort by score descending and break ties by ascending doc id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("invalid index: {0}")]
    Index(String),
    #[error("unsupported index version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<String>,
}

/// Documents with ids `0..len`, stored in id order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    documents: Vec<Document>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: usize,
    text: String,
}

#[derive(Serialize)]
struct CorpusRecordRef<'a> {
    id: usize,
    text: &'a str,
}

impl Corpus {
    /// Documents numbered in the order given.
    pub fn from_texts<T: AsRef<str>>(texts: impl IntoIterator<Item = T>) -> Result<Self> {
        Self::from_records(
            texts
                .into_iter()
                .enumerate()
                .map(|(id, t)| (id, t.as_ref().to_string()))
                .collect(),
        )
    }

    fn from_records(mut records: Vec<(usize, String)>) -> Result<Self> {
        if records.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        records.sort_by_key(|r| r.0);
        let mut documents = Vec::with_capacity(records.len());
        for (expected, (id, text)) in records.into_iter().enumerate() {
            if id != expected {
                return Err(RetrievalError::Corpus(format!(
                    "document ids must be unique and dense from 0; expected {expected}, found {id}"
                )));
            }
            let tokens = tokenize(&text);
            if tokens.is_empty() {
                return Err(RetrievalError::Corpus(format!("document {id} has no tokens")));
            }
            documents.push(Document { id, text, tokens });
        }
        Ok(Self { documents })
    }

    /// One `{"id": int, "text": string}` object per line; blank lines are
    /// skipped.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CorpusRecord = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push((r.id, r.text));
        }
        Self::from_records(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut w, &CorpusRecordRef { id: d.id, text: &d.text })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: usize) -> Option<&Document> {
        self.documents.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnowledgeCandidate {
    pub doc_id: usize,
    pub text: String,
    pub sparse_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_score: Option<f64>,
}

/// Maps a knowledge text's tokens to its embedding vector.
pub trait KnowledgeEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Vec<f64>>;
}

impl<F> KnowledgeEmbedder for F
where
    F: Fn(&[String]) -> Result<Vec<f64>>,
{
    fn embed(&self, tokens: &[String]) -> Result<Vec<f64>> {
        self(tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    corpus: Corpus,
    /// term -> (doc_id, term frequency), sorted by doc_id
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<usize>,
    avg_doc_len: f64,
    k1: f64,
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    version: u32,
    k1: f64,
    b: f64,
    documents: Vec<(usize, String)>,
    doc_len: Vec<usize>,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

pub fn build_index(corpus: &Corpus, k1: f64, b: f64) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    check_params(k1, b)?;
    let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
    let mut doc_len = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &doc.tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t.to_string()).or_default().push((doc.id, n));
        }
        doc_len.push(doc.tokens.len());
    }
    Ok(InvertedIndex::assemble(corpus.clone(), postings, doc_len, k1, b))
}

fn check_params(k1: f64, b: f64) -> Result<()> {
    if !(k1.is_finite() && k1 >= 0.0) {
        return Err(RetrievalError::Index(format!("k1 must be finite and nonnegative, got {k1}")));
    }
    if !(0.0..=1.0).contains(&b) {
        return Err(RetrievalError::Index(format!("b must lie in [0, 1], got {b}")));
    }
    Ok(())
}

fn by_score_then_id(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl InvertedIndex {
    fn assemble(
        corpus: Corpus,
        postings: BTreeMap<String, Vec<(usize, u32)>>,
        doc_len: Vec<usize>,
        k1: f64,
        b: f64,
    ) -> Self {
        let avg_doc_len = doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64;
        Self {
            corpus,
            postings,
            doc_len,
            avg_doc_len,
            k1,
            b,
        }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_len(&self, doc_id: usize) -> usize {
        self.doc_len[doc_id]
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, doc_id: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * self.doc_len[doc_id] as f64 / self.avg_doc_len;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// BM25 score of one document. Repeated query terms count repeatedly.
    pub fn bm25_score(&self, query: &[String], doc_id: usize) -> f64 {
        let mut score = 0.0;
        for t in query {
            let list = self.postings(t);
            if let Ok(i) = list.binary_search_by_key(&doc_id, |p| p.0) {
                score += self.term_score(self.idf(t), list[i].1, doc_id);
            }
        }
        score
    }

    /// Documents with a positive score, best `m` first.
    pub fn sparse_retrieve(&self, query: &[String], m: usize) -> Vec<KnowledgeCandidate> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for t in query {
            let idf = self.idf(t);
            for &(doc, tf) in self.postings(t) {
                *scores.entry(doc).or_insert(0.0) += self.term_score(idf, tf, doc);
            }
        }
        let mut ranked: Vec<(f64, usize)> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (s, d))
            .collect();
        ranked.sort_by(|&a, &b| by_score_then_id(a, b));
        ranked.truncate(m);
        ranked
            .into_iter()
            .map(|(s, d)| KnowledgeCandidate {
                doc_id: d,
                text: self.corpus.documents[d].text.clone(),
                sparse_score: s,
                dense_score: None,
            })
            .collect()
    }

    /// Sparse top `m`, then dense top `n`. `n` larger than `m` is clamped.
    pub fn retrieve(
        &self,
        embedder: &dyn KnowledgeEmbedder,
        query_emb: &[f64],
        query_text: &str,
        m: usize,
        n: usize,
    ) -> Result<Vec<KnowledgeCandidate>> {
        let candidates = self.sparse_retrieve(&tokenize(query_text), m);
        dense_rerank(query_emb, candidates, &self.corpus, embedder, n.min(m))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IndexFile {
            version: INDEX_FORMAT_VERSION,
            k1: self.k1,
            b: self.b,
            documents: self
                .corpus
                .documents
                .iter()
                .map(|d| (d.id, d.text.clone()))
                .collect(),
            doc_len: self.doc_len.clone(),
            postings: self.postings.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses and validates a serialized index. Floats round-trip exactly,
    /// so a loaded index reproduces every score bit for bit.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let found = v.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::Version {
                found,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let file: IndexFile = serde_json::from_value(v)?;
        check_params(file.k1, file.b)?;
        let corpus = Corpus::from_records(file.documents)?;
        if file.doc_len.len() != corpus.len() {
            return Err(RetrievalError::Index("doc_len does not match the document count".into()));
        }
        let mut totals = vec![0usize; corpus.len()];
        for (term, list) in &file.postings {
            if list.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(RetrievalError::Index(format!("postings for {term:?} are not sorted")));
            }
            for &(doc, tf) in list {
                let slot = totals
                    .get_mut(doc)
                    .ok_or_else(|| RetrievalError::Index(format!("posting for unknown document {doc}")))?;
                *slot += tf as usize;
            }
        }
        if totals != file.doc_len {
            return Err(RetrievalError::Index("term frequencies do not sum to doc_len".into()));
        }
        Ok(Self::assemble(corpus, file.postings, file.doc_len, file.k1, file.b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores each candidate by `<query_emb, embed(candidate)>` and keeps the
/// best `n`.
pub fn dense_rerank(
    query_emb: &[f64],
    candidates: Vec<KnowledgeCandidate>,
    corpus: &Corpus,
    embedder: &dyn KnowledgeEmbedder,
    n: usize,
) -> Result<Vec<KnowledgeCandidate>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for mut c in candidates {
        let doc = corpus
            .get(c.doc_id)
            .ok_or_else(|| RetrievalError::Corpus(format!("unknown document {}", c.doc_id)))?;
        let k = embedder.embed(&doc.tokens)?;
        if k.len() != query_emb.len() {
            return Err(RetrievalError::Embedding(format!(
                "knowledge embedding has width {}, query has {}",
                k.len(),
                query_emb.len()
            )));
        }
        let score = inner_product(query_emb, &k);
        if !score.is_finite() {
            return Err(RetrievalError::Embedding(format!(
                "non-finite dense score for document {}",
                c.doc_id
            )));
        }
        c.dense_score = Some(score);
        scored.push(c);
    }
    scored.sort_by(|a, b| {
        by_score_then_id(
            (a.dense_score.unwrap_or(0.0), a.doc_id),
            (b.dense_score.unwrap_or(0.0), b.doc_id),
        )
    });
    scored.truncate(n);
    Ok(scored)
}

#[cfg(test)]
mod tests;
