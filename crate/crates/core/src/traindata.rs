//! Supervised records for fine-tuning a reader on collected notes.
//!
//! Each record carries the chain-of-note prompt, the full notes-and-answer
//! target, and the character span of the answer inside the target. A seeded
//! fair coin per record picks the loss mode: `full_sequence` trains on the
//! whole target, `answer_only` masks characters `[0, start)` and
//! `[end, len)` so only the answer contributes.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Question;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::notes::NoteRecord;
use crate::prompt::PromptTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    FullSequence,
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub record_id: String,
    pub question_id: String,
    pub prompt_text: String,
    pub target_text: String,
    /// Character offsets of the final answer within `target_text`.
    pub answer_char_span: (usize, usize),
    pub loss_mode: LossMode,
    /// Seed the loss modes were drawn from.
    pub seed_lineage: u64,
}

impl TrainingRecord {
    pub fn answer(&self) -> Option<&str> {
        let (a, b) = crate::notes::char_to_byte_range(&self.target_text, self.answer_char_span)?;
        Some(&self.target_text[a..b])
    }

    /// Per-character loss weights: 1 where the loss applies, 0 where masked.
    pub fn char_mask(&self) -> Vec<u8> {
        let (start, end) = self.answer_char_span;
        (0..self.target_text.chars().count())
            .map(|i| match self.loss_mode {
                LossMode::FullSequence => 1,
                LossMode::AnswerOnly => u8::from((start..end).contains(&i)),
            })
            .collect()
    }
}

/// The mode sequence for `n` records under `seed`: position `i` takes the
/// top bit of the `i`-th draw, so modes depend only on position.
pub fn loss_modes(n: usize, seed: u64) -> Vec<LossMode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if rng.next_u64() >> 63 == 0 {
                LossMode::FullSequence
            } else {
                LossMode::AnswerOnly
            }
        })
        .collect()
}

pub fn emit_records(
    notes: &[NoteRecord],
    template: &PromptTemplate,
    seed: u64,
) -> Result<Vec<TrainingRecord>> {
    let modes = loss_modes(notes.len(), seed);
    notes
        .iter()
        .zip(modes)
        .enumerate()
        .map(|(i, (note, loss_mode))| {
            let record_id = format!("{}#{i}", note.question_id);
            let span_ok = note
                .answer_byte_range()
                .is_some_and(|(a, b)| note.notes_and_answer_text[a..b] == note.answer);
            if !span_ok || note.answer.is_empty() {
                return Err(Error::InvalidSpan {
                    record: record_id,
                    message: format!(
                        "span {:?} does not select answer {:?}",
                        note.answer_span, note.answer
                    ),
                });
            }
            let question = Question {
                id: note.question_id.clone(),
                text: note.question.clone(),
                gold_answers: Vec::new(),
            };
            let prompt = template.render_con(&question, &note.docs)?;
            Ok(TrainingRecord {
                record_id,
                question_id: note.question_id.clone(),
                prompt_text: prompt.text,
                target_text: note.notes_and_answer_text.clone(),
                answer_char_span: note.answer_span,
                loss_mode,
                seed_lineage: seed,
            })
        })
        .collect()
}

pub fn serialize_records(records: &[TrainingRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no training records to write".into()));
    }
    jsonl::write_all(path.as_ref(), records)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<TrainingRecord>> {
    jsonl::read_all(path.as_ref())
}
