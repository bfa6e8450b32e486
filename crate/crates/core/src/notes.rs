//! Chain-of-note output parsing, note and rejection classification, and the
//! teacher-model pipeline that collects note training data.
//!
//! A note chain looks like
//!
//! ```text
//! Wikipedia passage #1 discusses ... . Wikipedia passage #2 confirms ... .
//! Based on the information given in above passages, the answer is 1996
//! ```
//!
//! Passage headers are `Wikipedia passage #N` anywhere in the text, or
//! `Passage #N` / `Passage N:` at the start of a line. A header only opens a
//! new note when its index exceeds the previous note's and is at most `k`;
//! anything else is treated as an in-note reference. The final answer follows
//! the last `the answer is` / `Answer:` marker.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Question, RunMap};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::llm::{generate_batch, Backend, GenerationRequest};
use crate::metrics::{contains_normalized, normalized_tokens, ItemStatus};
use crate::prompt::{NoteCollectionOptions, NoteExemplar, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteType {
    DirectAnswer,
    Contextual,
    Irrelevant,
    Unclassified,
}

impl NoteType {
    /// Taxonomy letter: (a) direct answer, (b) contextual, (c) irrelevant.
    pub fn letter(self) -> Option<char> {
        match self {
            NoteType::DirectAnswer => Some('a'),
            NoteType::Contextual => Some('b'),
            NoteType::Irrelevant => Some('c'),
            NoteType::Unclassified => None,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            NoteType::DirectAnswer => "direct answer",
            NoteType::Contextual => "contextual inference",
            NoteType::Irrelevant => "irrelevant, answer unknown",
            NoteType::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingNote {
    /// 1-based.
    pub passage_index: usize,
    pub text: String,
    pub note_type: NoteType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Partial,
    AnswerOnly,
}

impl From<ParseStatus> for ItemStatus {
    fn from(s: ParseStatus) -> Self {
        match s {
            ParseStatus::Clean => ItemStatus::Clean,
            ParseStatus::Partial => ItemStatus::Partial,
            ParseStatus::AnswerOnly => ItemStatus::AnswerOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub notes: Vec<ReadingNote>,
    pub final_answer: String,
    pub is_reject: bool,
    pub raw_text: String,
    pub parse_status: ParseStatus,
    /// Byte range of `final_answer` inside `raw_text`.
    pub answer_span: (usize, usize),
}

static WIKI_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bwikipedia\s+passage\s*#\s*(\d+)").unwrap());
static LINE_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[ \t]*(?:\*\*)?passage\s*(?:#\s*)?(\d+)(?:\*\*)?\s*[:.)]?").unwrap()
});
static ANSWER_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bthe\s+answer\s+is\b|\banswer\s*:").unwrap());

struct Header {
    start: usize,
    end: usize,
    index: usize,
}

fn find_headers(text: &str, k: usize) -> Vec<Header> {
    let mut candidates: Vec<Header> = WIKI_HEADER
        .captures_iter(text)
        .chain(LINE_HEADER.captures_iter(text))
        .filter_map(|c| {
            let m = c.get(0)?;
            let index = c[1].parse().ok()?;
            // Line-anchored matches may include leading indentation.
            let start = m.start() + (m.as_str().len() - m.as_str().trim_start().len());
            Some(Header {
                start,
                end: m.end(),
                index,
            })
        })
        .collect();
    candidates.sort_by_key(|h| (h.start, std::cmp::Reverse(h.end)));
    let mut accepted: Vec<Header> = Vec::new();
    for h in candidates {
        let after_last = accepted
            .last()
            .is_none_or(|l| h.start >= l.end && h.index > l.index);
        if after_last && (1..=k).contains(&h.index) {
            accepted.push(h);
        }
    }
    accepted
}

const TRAILING: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '*', '`', ')', ' ', '\t',
];
const LEADING: &[char] = &[':', '"', '\'', '*', '`', ' ', '\t', '-'];

/// Trims decorations around an answer, returning the byte range kept.
fn clean_span(text: &str, start: usize, end: usize) -> (usize, usize) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start_matches(LEADING).len();
    let body = &slice[lead..];
    let mut kept = body.trim_end_matches(TRAILING);
    // Keep a closing paren when its opener is part of the answer.
    if body[kept.len()..].starts_with(')') && kept.contains('(') {
        kept = &body[..kept.len() + 1];
    }
    (start + lead, start + lead + kept.len())
}

/// Start of the sentence containing byte `pos`, but no earlier than `floor`.
fn sentence_start(text: &str, floor: usize, pos: usize) -> usize {
    let region = &text[floor..pos];
    let mut best = None;
    for pat in [". ", ".\n", "! ", "? ", "\n"] {
        if let Some(i) = region.rfind(pat) {
            let after = i + pat.len();
            best = Some(best.map_or(after, |b: usize| b.max(after)));
        }
    }
    floor + best.unwrap_or(0)
}

fn note_body(text: &str, start: usize, end: usize) -> &str {
    text[start..end]
        .trim()
        .trim_start_matches([':', '-', ')', '*'])
        .trim()
}

pub fn parse_con_output(text: &str, k: usize) -> Result<ParsedOutput> {
    if text.trim().is_empty() {
        return Err(Error::Unparseable("empty output".into()));
    }
    let headers = find_headers(text, k);
    let notes_end_floor = headers.last().map_or(0, |h| h.end);

    let marker = ANSWER_MARKER
        .find_iter(text)
        .filter(|m| m.start() >= notes_end_floor)
        .last();

    let (notes_end, answer_range) = match marker {
        Some(m) => {
            let line_end = text[m.end()..]
                .find('\n')
                .map_or(text.len(), |i| m.end() + i);
            let mut clause = sentence_start(text, notes_end_floor, m.start());
            if let Some(last) = headers.last() {
                if note_body(text, last.end, clause).is_empty() {
                    clause = m.start();
                }
            }
            (clause, clean_span(text, m.end(), line_end))
        }
        None => {
            let trimmed_end = text.trim_end().len();
            let line_start = text[..trimmed_end].rfind('\n').map_or(0, |i| i + 1);
            let on_note_line = headers.last().is_some_and(|h| h.start >= line_start);
            if on_note_line {
                return Err(Error::Unparseable(
                    "no answer marker and no answer line after the notes".into(),
                ));
            }
            (line_start, clean_span(text, line_start, trimmed_end))
        }
    };

    let final_answer = text[answer_range.0..answer_range.1].to_owned();
    if final_answer.is_empty() {
        return Err(Error::Unparseable("answer marker without an answer".into()));
    }

    let mut notes = Vec::with_capacity(headers.len());
    for (i, h) in headers.iter().enumerate() {
        let end = headers.get(i + 1).map_or(notes_end, |n| n.start);
        let body = note_body(text, h.end, end.max(h.end));
        if !body.is_empty() {
            notes.push(ReadingNote {
                passage_index: h.index,
                text: body.to_owned(),
                note_type: NoteType::Unclassified,
            });
        }
    }

    let parse_status = if notes.is_empty() {
        ParseStatus::AnswerOnly
    } else if notes.len() == k
        && notes
            .iter()
            .enumerate()
            .all(|(i, n)| n.passage_index == i + 1)
    {
        ParseStatus::Clean
    } else {
        ParseStatus::Partial
    };

    Ok(ParsedOutput {
        notes,
        is_reject: classify_reject(&final_answer),
        final_answer,
        raw_text: text.to_owned(),
        parse_status,
        answer_span: answer_range,
    })
}

/// Trims a standard-mode generation to its answer: first non-empty line,
/// minus any `Answer:` prefix and trailing punctuation.
pub fn parse_standard_output(text: &str) -> Option<String> {
    static PREFIX: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?i)^\s*(?:the\s+)?answer\s*(?::|is\b)").unwrap());
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let start = PREFIX.find(line).map_or(0, |m| m.end());
    let (a, b) = clean_span(line, start, line.len());
    let answer = line[a..b].trim();
    (!answer.is_empty()).then(|| answer.to_owned())
}

/// Joins notes and an answer into the canonical chain the parser reads.
pub fn render_note_chain(notes: &[&str], answer: &str) -> String {
    let mut out = String::new();
    for (i, note) in notes.iter().enumerate() {
        out.push_str(&format!("Wikipedia passage #{} {} ", i + 1, note.trim()));
    }
    out.push_str("Based on the information given in above passages, the answer is ");
    out.push_str(answer);
    out.push('.');
    out
}

// --- rejection lexicon ---

const BUILTIN_LEXICON: &str = include_str!("../data/reject_lexicon.txt");

/// Normalized phrases that mark an answer as a rejection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectLexicon {
    pub version: String,
    entries: Vec<Vec<String>>,
    strip_prefixes: Vec<Vec<String>>,
}

impl RejectLexicon {
    pub fn parse(source: &str) -> Result<Self> {
        let mut version = None;
        let mut entries = Vec::new();
        let mut strip_prefixes = Vec::new();
        for line in source.lines().map(str::trim) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("version:") {
                    version = Some(v.trim().to_owned());
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (target, phrase) = match line.strip_prefix("strip:") {
                Some(p) => (&mut strip_prefixes, p),
                None => (&mut entries, line),
            };
            let tokens = normalized_tokens(phrase);
            if !tokens.is_empty() {
                target.push(tokens);
            }
        }
        let version =
            version.ok_or_else(|| Error::Config("reject lexicon lacks a version line".into()))?;
        if entries.is_empty() {
            return Err(Error::Config("reject lexicon has no entries".into()));
        }
        Ok(Self {
            version,
            entries,
            strip_prefixes,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn builtin() -> &'static RejectLexicon {
        static LEXICON: LazyLock<RejectLexicon> = LazyLock::new(|| {
            RejectLexicon::parse(BUILTIN_LEXICON).expect("bundled lexicon parses")
        });
        &LEXICON
    }

    pub fn is_reject(&self, answer: &str) -> bool {
        let tokens = normalized_tokens(answer);
        if tokens.is_empty() {
            return false;
        }
        let mut candidates = vec![tokens.as_slice()];
        if let Some(p) = self
            .strip_prefixes
            .iter()
            .find(|p| tokens.len() > p.len() && tokens.starts_with(p))
        {
            candidates.push(&tokens[p.len()..]);
        }
        candidates
            .iter()
            .any(|c| self.entries.iter().any(|e| c.starts_with(e)))
    }
}

pub fn classify_reject(answer: &str) -> bool {
    RejectLexicon::builtin().is_reject(answer)
}

// --- note typing (analysis only, never used for scoring) ---

const IRRELEVANCE_PHRASES: &[&str] = &[
    "does not mention",
    "not relevant",
    "irrelevant",
    "unrelated",
];

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "of",
    "in",
    "on",
    "at",
    "to",
    "for",
    "by",
    "with",
    "from",
    "and",
    "or",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "it",
    "its",
    "this",
    "that",
    "these",
    "those",
    "as",
    "who",
    "whom",
    "what",
    "when",
    "where",
    "which",
    "why",
    "how",
    "did",
    "do",
    "does",
    "has",
    "have",
    "had",
    "not",
    "no",
    "but",
    "if",
    "than",
    "then",
    "there",
    "their",
    "they",
    "he",
    "she",
    "his",
    "her",
    "we",
    "you",
    "i",
    "about",
    "into",
    "over",
    "after",
    "before",
    "s",
    // vocabulary of the notes themselves
    "passage",
    "passages",
    "wikipedia",
    "question",
    "answer",
    "mention",
    "mentions",
    "relevant",
    "information",
    "document",
];

fn content_tokens(text: &str) -> HashSet<String> {
    normalized_tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Heuristic note typing: a gold answer in the note makes it a direct
/// answer; sharing content words with the question makes it contextual;
/// otherwise an irrelevance phrase makes it irrelevant.
pub fn classify_note_type(
    note: &ReadingNote,
    gold_answers: &[String],
    question: &Question,
) -> NoteType {
    if gold_answers
        .iter()
        .any(|g| contains_normalized(&note.text, g))
    {
        return NoteType::DirectAnswer;
    }
    let question_terms = content_tokens(&question.text);
    if content_tokens(&note.text)
        .iter()
        .any(|t| question_terms.contains(t))
    {
        return NoteType::Contextual;
    }
    if IRRELEVANCE_PHRASES
        .iter()
        .any(|p| contains_normalized(&note.text, p))
    {
        return NoteType::Irrelevant;
    }
    NoteType::Unclassified
}

pub fn classify_notes(parsed: &mut ParsedOutput, gold_answers: &[String], question: &Question) {
    for note in &mut parsed.notes {
        note.note_type = classify_note_type(note, gold_answers, question);
    }
}

// --- teacher note collection ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub question_id: String,
    pub question: String,
    pub docs: Vec<Document>,
    pub notes_and_answer_text: String,
    pub answer: String,
    /// Character (Unicode scalar) offsets of `answer` in `notes_and_answer_text`.
    pub answer_span: (usize, usize),
    pub source_model: String,
}

impl NoteRecord {
    /// The answer span as a byte range, if it lies on character boundaries in bounds.
    pub fn answer_byte_range(&self) -> Option<(usize, usize)> {
        char_to_byte_range(&self.notes_and_answer_text, self.answer_span)
    }
}

pub(crate) fn byte_to_char_range(text: &str, (start, end): (usize, usize)) -> (usize, usize) {
    let s = text[..start].chars().count();
    (s, s + text[start..end].chars().count())
}

pub(crate) fn char_to_byte_range(
    text: &str,
    (start, end): (usize, usize),
) -> Option<(usize, usize)> {
    if start > end {
        return None;
    }
    let mut indices = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()));
    let b_start = indices.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some((b_start, b_end))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CollectionConfig {
    pub sample_size: usize,
    pub seed: u64,
    /// Passages shown to the teacher per question.
    pub k: usize,
    pub model_name: String,
    pub exemplars: Vec<NoteExemplar>,
    pub options: NoteCollectionOptions,
    pub max_in_flight: usize,
}

impl CollectionConfig {
    pub fn new(sample_size: usize, seed: u64, model_name: impl Into<String>) -> Self {
        Self {
            sample_size,
            seed,
            k: 5,
            model_name: model_name.into(),
            exemplars: crate::prompt::builtin_exemplars(),
            options: NoteCollectionOptions::default(),
            max_in_flight: 4,
        }
    }
}

/// Where collected records and skips are written as they are produced.
/// Re-running against the same directory resumes after the last written item.
#[derive(Debug, Clone)]
pub struct NoteCheckpoint {
    pub records_path: PathBuf,
    pub skips_path: PathBuf,
}

impl NoteCheckpoint {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            records_path: dir.join("notes.jsonl"),
            skips_path: dir.join("skips.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectionOutput {
    pub records: Vec<NoteRecord>,
    pub skips: Vec<SkipEntry>,
}

/// Seeded sample of `n` distinct indices out of `len` (partial Fisher-Yates).
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n.min(len) {
        let j = rng.random_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(n.min(len));
    pool
}

fn note_record(
    question: &Question,
    docs: &[Document],
    text: &str,
    model: &str,
) -> Result<NoteRecord> {
    let text = text.trim_end();
    let parsed = parse_con_output(text, docs.len())?;
    if parsed.notes.is_empty() {
        return Err(Error::Unparseable("teacher output has no notes".into()));
    }
    Ok(NoteRecord {
        question_id: question.id.clone(),
        question: question.text.clone(),
        docs: docs.to_vec(),
        notes_and_answer_text: text.to_owned(),
        answer_span: byte_to_char_range(text, parsed.answer_span),
        answer: parsed.final_answer,
        source_model: model.to_owned(),
    })
}

struct Sink<'a> {
    checkpoint: Option<&'a NoteCheckpoint>,
    writers: Option<(BufWriter<File>, BufWriter<File>)>,
    output: CollectionOutput,
}

impl Sink<'_> {
    fn record(&mut self, rec: NoteRecord) -> Result<()> {
        if let (Some((w, _)), Some(cp)) = (self.writers.as_mut(), self.checkpoint) {
            jsonl::append(w, &cp.records_path, &rec)?;
        }
        self.output.records.push(rec);
        Ok(())
    }

    fn skip(&mut self, question_id: &str, reason: &str) -> Result<()> {
        tracing::info!(question_id, reason, "skipping question");
        let skip = SkipEntry {
            question_id: question_id.to_owned(),
            reason: reason.to_owned(),
        };
        if let (Some((_, w)), Some(cp)) = (self.writers.as_mut(), self.checkpoint) {
            jsonl::append(w, &cp.skips_path, &skip)?;
        }
        self.output.skips.push(skip);
        Ok(())
    }

    fn abort(&self, reason: String) -> Error {
        Error::CollectionAborted {
            completed: self.output.records.len(),
            checkpoint: self.checkpoint.map_or_else(
                || "<none>".to_owned(),
                |c| c.records_path.display().to_string(),
            ),
            reason,
        }
    }
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Samples questions, asks the teacher for notes on each, and keeps the
/// parseable outputs. An unparseable output is retried once, then skipped.
/// A backend failure aborts; completed items are already on disk when a
/// checkpoint is given.
pub fn collect_training_notes<B: Backend + ?Sized>(
    questions: &[Question],
    runs: &RunMap,
    backend: &B,
    template: &PromptTemplate,
    config: &CollectionConfig,
    checkpoint: Option<&NoteCheckpoint>,
) -> Result<CollectionOutput> {
    if config.sample_size > questions.len() {
        return Err(Error::InvalidInput(format!(
            "sample size {} exceeds {} questions",
            config.sample_size,
            questions.len()
        )));
    }
    let mut sink = Sink {
        checkpoint,
        writers: None,
        output: CollectionOutput::default(),
    };
    if let Some(cp) = checkpoint {
        if cp.records_path.exists() {
            sink.output.records = jsonl::read_all(&cp.records_path)?;
        }
        if cp.skips_path.exists() {
            sink.output.skips = jsonl::read_all(&cp.skips_path)?;
        }
        sink.writers = Some((open_append(&cp.records_path)?, open_append(&cp.skips_path)?));
    }
    let done: HashSet<String> = sink
        .output
        .records
        .iter()
        .map(|r| r.question_id.clone())
        .chain(sink.output.skips.iter().map(|s| s.question_id.clone()))
        .collect();

    let pending: Vec<&Question> = sample_indices(questions.len(), config.sample_size, config.seed)
        .into_iter()
        .map(|i| &questions[i])
        .filter(|q| !done.contains(&q.id))
        .collect();

    for chunk in pending.chunks(config.max_in_flight.max(1)) {
        let mut jobs = Vec::new();
        for q in chunk {
            let docs: Vec<Document> = match runs.get(&q.id) {
                Some(run) => run.ranked_docs.iter().take(config.k).cloned().collect(),
                None => {
                    sink.skip(&q.id, "missing run")?;
                    continue;
                }
            };
            if docs.is_empty() {
                sink.skip(&q.id, "no passages")?;
                continue;
            }
            let prompt = template.render_note_collection(
                q,
                &docs,
                &q.gold_answers,
                &config.exemplars,
                &config.options,
            )?;
            jobs.push((
                *q,
                docs,
                GenerationRequest::new(prompt, config.model_name.clone()),
            ));
        }
        let reqs: Vec<_> = jobs.iter().map(|(_, _, r)| r.clone()).collect();
        let responses = generate_batch(backend, &reqs, config.max_in_flight);
        for ((q, docs, req), resp) in jobs.into_iter().zip(responses) {
            let text = match resp {
                Ok(r) if !r.is_error() => r.text.unwrap_or_default(),
                Ok(r) => return Err(sink.abort(r.error.unwrap_or_default())),
                Err(e) => return Err(sink.abort(e.to_string())),
            };
            let record = match note_record(q, &docs, &text, &config.model_name) {
                Ok(rec) => Some(rec),
                Err(_) => {
                    let retry = backend
                        .generate(&req)
                        .map_err(|e| sink.abort(e.to_string()))?;
                    if retry.is_error() {
                        return Err(sink.abort(retry.error.unwrap_or_default()));
                    }
                    note_record(
                        q,
                        &docs,
                        retry.text.as_deref().unwrap_or(""),
                        &config.model_name,
                    )
                    .ok()
                }
            };
            match record {
                Some(rec) => sink.record(rec)?,
                None => sink.skip(&q.id, "unparseable after retry")?,
            }
        }
    }
    Ok(sink.output)
}

/// Writes the first `n` records for manual review.
pub fn write_review_sample(records: &[NoteRecord], n: usize, path: &Path) -> Result<()> {
    jsonl::write_all(path, records.iter().take(n))
}

pub fn load_note_records(path: impl AsRef<Path>) -> Result<Vec<NoteRecord>> {
    jsonl::read_all(path.as_ref())
}

pub fn write_note_records(path: impl AsRef<Path>, records: &[NoteRecord]) -> Result<()> {
    jsonl::write_all(path.as_ref(), records)
}
