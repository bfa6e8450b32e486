//! Prompt rendering for standard retrieval QA, chain-of-note QA, and the
//! teacher prompt used to collect note training data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Document, Question};
use crate::error::{Error, Result};
use crate::notes::NoteType;

const STANDARD_INSTRUCTION: &str = include_str!("../templates/standard.txt");
const CON_INSTRUCTION: &str = include_str!("../templates/con.txt");
const NOTE_COLLECTION_INSTRUCTION: &str = include_str!("../templates/note_collection.txt");
const BUILTIN_EXEMPLARS: &str = include_str!("../data/note_exemplars.json");

pub const PASSAGE_HEADER: &str = "Wikipedia passage #{index}:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Standard,
    Con,
    NoteCollection,
}

impl TemplateMode {
    fn as_str(self) -> &'static str {
        match self {
            TemplateMode::Standard => "standard",
            TemplateMode::Con => "con",
            TemplateMode::NoteCollection => "note_collection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub mode: TemplateMode,
    pub instruction_text: String,
    pub passage_header_pattern: String,
    pub version: String,
}

impl PromptTemplate {
    /// Builds a template; the version is derived from its content.
    pub fn new(mode: TemplateMode, instruction_text: &str, passage_header_pattern: &str) -> Self {
        let instruction_text = instruction_text.trim_end().to_owned();
        let mut h = Sha256::new();
        h.update(mode.as_str());
        h.update([0]);
        h.update(&instruction_text);
        h.update([0]);
        h.update(passage_header_pattern);
        let version = format!("{}-{}", mode.as_str(), &hex::encode(h.finalize())[..12]);
        Self {
            mode,
            instruction_text,
            passage_header_pattern: passage_header_pattern.to_owned(),
            version,
        }
    }

    pub fn standard() -> Self {
        Self::new(TemplateMode::Standard, STANDARD_INSTRUCTION, PASSAGE_HEADER)
    }

    pub fn con() -> Self {
        Self::new(TemplateMode::Con, CON_INSTRUCTION, PASSAGE_HEADER)
    }

    pub fn note_collection() -> Self {
        Self::new(
            TemplateMode::NoteCollection,
            NOTE_COLLECTION_INSTRUCTION,
            PASSAGE_HEADER,
        )
    }

    pub fn builtin(mode: TemplateMode) -> Self {
        match mode {
            TemplateMode::Standard => Self::standard(),
            TemplateMode::Con => Self::con(),
            TemplateMode::NoteCollection => Self::note_collection(),
        }
    }

    pub fn instruction(&self, k: usize) -> String {
        self.instruction_text
            .replace("{passage_phrase}", &passage_phrase(k))
    }

    fn push_passages(&self, out: &mut String, docs: &[Document]) {
        for (i, d) in docs.iter().enumerate() {
            let header = self
                .passage_header_pattern
                .replace("{index}", &(i + 1).to_string());
            if d.title.is_empty() {
                let _ = writeln!(out, "{header} {}", d.text);
            } else {
                let _ = writeln!(out, "{header} {}. {}", d.title, d.text);
            }
        }
    }

    fn assemble(&self, question: &Question, k: usize, text: String) -> AssembledPrompt {
        AssembledPrompt {
            content_hash: content_hash(&text),
            text,
            mode: self.mode,
            k,
            question_id: question.id.clone(),
            template_version: self.version.clone(),
        }
    }

    /// Instruction, numbered passages, question, then an `Answer:` cue line.
    /// With no passages this is the closed-book prompt.
    pub fn render_standard(&self, question: &Question, docs: &[Document]) -> AssembledPrompt {
        let mut text = self.instruction(docs.len());
        text.push_str("\n\n");
        if !docs.is_empty() {
            self.push_passages(&mut text, docs);
            text.push('\n');
        }
        let _ = write!(text, "Question: {}\nAnswer:", question.text.trim());
        self.assemble(question, docs.len(), text)
    }

    /// Instruction with the passage count templated, numbered passages, and the
    /// question. No answer prefix is forced; the model starts with its notes.
    pub fn render_con(&self, question: &Question, docs: &[Document]) -> Result<AssembledPrompt> {
        if docs.is_empty() {
            return Err(Error::EmptyPassages);
        }
        let mut text = self.instruction(docs.len());
        text.push_str("\n\n");
        self.push_passages(&mut text, docs);
        let _ = write!(text, "\nQuestion: {}", question.text.trim());
        Ok(self.assemble(question, docs.len(), text))
    }

    pub fn render_note_collection(
        &self,
        question: &Question,
        docs: &[Document],
        gold_answers: &[String],
        exemplars: &[NoteExemplar],
        options: &NoteCollectionOptions,
    ) -> Result<AssembledPrompt> {
        if docs.is_empty() {
            return Err(Error::EmptyPassages);
        }
        for ty in [
            NoteType::DirectAnswer,
            NoteType::Contextual,
            NoteType::Irrelevant,
        ] {
            if !exemplars.iter().any(|e| e.note_type == ty) {
                return Err(Error::MissingExemplar(ty.letter().expect("typed note")));
            }
        }
        let mut text = self.instruction(docs.len());
        text.push_str("\n\n");
        for ex in exemplars {
            let label = match ex.note_type.letter() {
                Some(c) => format!("({c}) {}", ex.note_type.description()),
                None => ex.note_type.description().to_owned(),
            };
            let _ = writeln!(text, "Example, note type {label}:");
            let ex_docs: Vec<Document> = ex
                .passages
                .iter()
                .map(|p| Document {
                    id: String::new(),
                    title: String::new(),
                    text: p.clone(),
                    score: None,
                })
                .collect();
            self.push_passages(&mut text, &ex_docs);
            let _ = writeln!(text, "Question: {}", ex.question);
            let _ = writeln!(text, "Notes and answer: {}\n", ex.output);
        }
        text.push_str("Now write reading notes for the following question and passages.\n\n");
        self.push_passages(&mut text, docs);
        let _ = write!(text, "\nQuestion: {}", question.text.trim());
        if options.include_gold_answers && !gold_answers.is_empty() {
            let _ = write!(text, "\nGold answer: {}", gold_answers.join(" | "));
        }
        Ok(self.assemble(question, docs.len(), text))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub mode: TemplateMode,
    /// Number of passages rendered.
    pub k: usize,
    pub question_id: String,
    /// Hex SHA-256 of `text`.
    pub content_hash: String,
    pub template_version: String,
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// An in-context example showing one note type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteExemplar {
    pub note_type: NoteType,
    pub question: String,
    pub passages: Vec<String>,
    pub output: String,
}

/// The three exemplars shipped with the crate (original text, one per note type).
pub fn builtin_exemplars() -> Vec<NoteExemplar> {
    serde_json::from_str(BUILTIN_EXEMPLARS).expect("bundled exemplars are valid JSON")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteCollectionOptions {
    /// Show the gold answers to the teacher so its notes are grounded.
    pub include_gold_answers: bool,
}

impl Default for NoteCollectionOptions {
    fn default() -> Self {
        Self {
            include_gold_answers: true,
        }
    }
}

const NUMBER_WORDS: [&str; 10] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// "five Wikipedia passages", "one Wikipedia passage", "12 Wikipedia passages".
pub fn passage_phrase(k: usize) -> String {
    let count = match k {
        1..=10 => NUMBER_WORDS[k - 1].to_owned(),
        _ => k.to_string(),
    };
    if k == 1 {
        format!("{count} Wikipedia passage")
    } else {
        format!("{count} Wikipedia passages")
    }
}

pub fn render_standard(question: &Question, docs: &[Document]) -> AssembledPrompt {
    PromptTemplate::standard().render_standard(question, docs)
}

pub fn render_con(question: &Question, docs: &[Document]) -> Result<AssembledPrompt> {
    PromptTemplate::con().render_con(question, docs)
}

pub fn render_note_collection(
    question: &Question,
    docs: &[Document],
    gold_answers: &[String],
    exemplars: &[NoteExemplar],
) -> Result<AssembledPrompt> {
    PromptTemplate::note_collection().render_note_collection(
        question,
        docs,
        gold_answers,
        exemplars,
        &NoteCollectionOptions::default(),
    )
}
