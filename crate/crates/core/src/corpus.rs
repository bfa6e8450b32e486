//! Ingestion of questions, retrieval runs and document corpora from
//! line-delimited JSON, plus seeded random-document sampling.
//!
//! File schemas (one JSON object per line, UTF-8):
//!
//! - questions: `{"id": str, "question": str, "answers": [str]}`
//! - retrieval runs: `{"question_id": str, "docs": [{"id", "title", "text", "score"?}]}`
//! - corpus: `{"id": str, "title": str, "text": str}`
//!
//! Unknown fields are ignored; the first record carrying any triggers a
//! single warning per file.
//!
//! Random sampling uses ChaCha8 seeded through `SeedableRng::seed_from_u64`
//! and a partial Fisher-Yates shuffle over the eligible documents in
//! ingestion order, drawing each swap index with `random_range`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "question")]
    pub text: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Retrieved documents for one question in descending retriever preference.
/// The order is the ingestion order and is never re-sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub question_id: String,
    #[serde(rename = "docs")]
    pub ranked_docs: Vec<Document>,
}

pub type RunMap = BTreeMap<String, RetrievalRun>;

#[derive(Deserialize)]
struct Raw<T> {
    #[serde(flatten)]
    record: T,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Deserialize)]
struct RawRun {
    question_id: String,
    docs: Vec<Raw<Document>>,
}

struct ExtraFieldWarning<'a> {
    path: &'a Path,
    warned: bool,
}

impl<'a> ExtraFieldWarning<'a> {
    fn new(path: &'a Path) -> Self {
        Self {
            path,
            warned: false,
        }
    }

    fn check(&mut self, line: usize, extra: &Map<String, Value>) {
        if !self.warned && !extra.is_empty() {
            self.warned = true;
            let fields: Vec<_> = extra.keys().map(String::as_str).collect();
            tracing::warn!(
                path = %self.path.display(),
                line,
                "ignoring unknown fields {:?} (further occurrences not reported)",
                fields
            );
        }
    }
}

fn validate_document(path: &Path, line: usize, doc: &Document) -> Result<()> {
    if doc.text.is_empty() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line,
            message: format!("document {} has empty text", doc.id),
        });
    }
    Ok(())
}

/// Loads questions in file order.
pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let mut warn = ExtraFieldWarning::new(path);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    jsonl::read_records(path, |line, raw: Raw<Question>| {
        warn.check(line, &raw.extra);
        let q = raw.record;
        if q.gold_answers.is_empty() {
            return Err(Error::EmptyGoldAnswers { line });
        }
        if q.text.trim().is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: "empty question text".into(),
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateQuestion(q.id));
        }
        out.push(q);
        Ok(())
    })?;
    Ok(out)
}

pub fn load_retrieval_runs(path: impl AsRef<Path>) -> Result<RunMap> {
    let path = path.as_ref();
    let mut warn = ExtraFieldWarning::new(path);
    let mut runs = RunMap::new();
    jsonl::read_records(path, |line, raw: Raw<RawRun>| {
        warn.check(line, &raw.extra);
        let RawRun { question_id, docs } = raw.record;
        let mut ids = HashSet::new();
        let mut ranked_docs = Vec::with_capacity(docs.len());
        for d in docs {
            warn.check(line, &d.extra);
            let doc = d.record;
            validate_document(path, line, &doc)?;
            if !ids.insert(doc.id.clone()) {
                return Err(Error::DuplicateDocumentInRun {
                    question_id,
                    doc_id: doc.id,
                });
            }
            ranked_docs.push(doc);
        }
        if runs.contains_key(&question_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate retrieval run for question {question_id} at line {line}"
            )));
        }
        runs.insert(
            question_id.clone(),
            RetrievalRun {
                question_id,
                ranked_docs,
            },
        );
        Ok(())
    })?;
    Ok(runs)
}

pub fn write_questions(path: impl AsRef<Path>, questions: &[Question]) -> Result<()> {
    jsonl::write_all(path.as_ref(), questions)
}

pub fn write_retrieval_runs(path: impl AsRef<Path>, runs: &RunMap) -> Result<()> {
    jsonl::write_all(path.as_ref(), runs.values())
}

/// Id-addressable corpus, kept in ingestion order.
#[derive(Debug, Clone, Default)]
pub struct DocumentStore {
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl DocumentStore {
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut store = DocumentStore::default();
        for doc in docs {
            store.insert(doc)?;
        }
        Ok(store)
    }

    fn insert(&mut self, doc: Document) -> Result<()> {
        if self.index.contains_key(&doc.id) {
            return Err(Error::DuplicateDocument(doc.id));
        }
        self.index.insert(doc.id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.documents.len()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.documents[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Lazily yields every non-excluded document exactly once in a
    /// seed-determined uniformly random order.
    pub fn shuffled<'a>(&'a self, seed: u64, exclude_ids: &HashSet<String>) -> RandomDocuments<'a> {
        let pool: Vec<usize> = self
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| !exclude_ids.contains(&d.id))
            .map(|(i, _)| i)
            .collect();
        RandomDocuments {
            store: self,
            pool,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub struct RandomDocuments<'a> {
    store: &'a DocumentStore,
    pool: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl RandomDocuments<'_> {
    pub fn eligible(&self) -> usize {
        self.pool.len()
    }
}

impl<'a> Iterator for RandomDocuments<'a> {
    type Item = &'a Document;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.pool.len() {
            return None;
        }
        let j = self.rng.random_range(self.next..self.pool.len());
        self.pool.swap(self.next, j);
        let doc = &self.store.documents[self.pool[self.next]];
        self.next += 1;
        Some(doc)
    }
}

pub fn load_document_store(path: impl AsRef<Path>) -> Result<DocumentStore> {
    let path = path.as_ref();
    let mut warn = ExtraFieldWarning::new(path);
    let mut store = DocumentStore::default();
    jsonl::read_records(path, |line, raw: Raw<Document>| {
        warn.check(line, &raw.extra);
        validate_document(path, line, &raw.record)?;
        store.insert(raw.record)
    })?;
    Ok(store)
}

pub fn write_document_store(path: impl AsRef<Path>, store: &DocumentStore) -> Result<()> {
    jsonl::write_all(path.as_ref(), store.documents())
}

/// Draws `n` distinct documents not in `exclude_ids`.
pub fn sample_random_documents(
    store: &DocumentStore,
    n: usize,
    seed: u64,
    exclude_ids: &HashSet<String>,
) -> Result<Vec<Document>> {
    let iter = store.shuffled(seed, exclude_ids);
    if iter.eligible() < n {
        return Err(Error::InsufficientDocuments {
            need: n,
            have: iter.eligible(),
        });
    }
    Ok(iter.take(n).cloned().collect())
}
