//! Answer normalization, exact match, token F1 and reject-rate aggregation.
//!
//! Normalization follows the SQuAD/DPR evaluation convention: lowercase,
//! strip ASCII punctuation, drop the articles `a`/`an`/`the` as whole words,
//! and collapse whitespace.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub(crate) fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_answer(s)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// True when the normalized `needle` occurs in the normalized `haystack` as a
/// contiguous run of whole tokens. An answer that normalizes to nothing never matches.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = normalized_tokens(needle);
    if needle.is_empty() {
        return false;
    }
    let hay = normalized_tokens(haystack);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn exact_match(pred: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(pred);
    golds.iter().any(|g| normalize_answer(g) == pred) as u8
}

fn f1_single(pred_tokens: &[String], gold: &str) -> f64 {
    let gold_tokens = normalized_tokens(gold);
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return (pred_tokens.is_empty() && gold_tokens.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred_tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-bag F1 against the best-matching gold answer.
pub fn f1(pred: &str, golds: &[String]) -> f64 {
    let pred_tokens = normalized_tokens(pred);
    golds
        .iter()
        .map(|g| f1_single(&pred_tokens, g))
        .fold(0.0, f64::max)
}

/// How a rejected ("unknown") answer enters the EM/F1 columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectScoring {
    /// Rejections score 0/0 and are reported only through the reject rate.
    #[default]
    Zero,
    /// Score the literal rejection text like any other prediction.
    Literal,
}

/// Outcome of turning a raw generation into a scoreable prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Clean,
    Partial,
    AnswerOnly,
    /// Standard-mode output, trimmed but not note-parsed.
    Raw,
    Unparseable,
    GenerationError,
}

impl ItemStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, ItemStatus::Unparseable | ItemStatus::GenerationError)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub question_id: String,
    pub condition: String,
    pub em: u8,
    pub f1: f64,
    pub is_reject: bool,
    pub pred: String,
    pub parse_status: ItemStatus,
}

impl ScoredItem {
    /// Scores one prediction. Failed items always score 0/0.
    pub fn score(
        question_id: &str,
        condition: &str,
        pred: &str,
        golds: &[String],
        is_reject: bool,
        status: ItemStatus,
        rule: RejectScoring,
    ) -> Self {
        let zeroed = status.is_failure() || (is_reject && rule == RejectScoring::Zero);
        let (em, f1) = if zeroed {
            (0, 0.0)
        } else {
            (exact_match(pred, golds), f1(pred, golds))
        };
        ScoredItem {
            question_id: question_id.to_owned(),
            condition: condition.to_owned(),
            em,
            f1,
            is_reject,
            pred: pred.to_owned(),
            parse_status: status,
        }
    }
}

/// Fraction (not percent) of rejected items.
pub fn reject_rate(items: &[ScoredItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidInput(
            "reject rate of an empty item list".into(),
        ));
    }
    Ok(items.iter().filter(|i| i.is_reject).count() as f64 / items.len() as f64)
}

/// Per-condition means, in percent, kept at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub condition: String,
    pub n: usize,
    pub em_mean: f64,
    pub f1_mean: f64,
    pub reject_rate: f64,
    pub n_unparseable: usize,
    #[serde(default)]
    pub n_generation_errors: usize,
}

impl MetricsSummary {
    pub fn em_display(&self) -> String {
        format!("{:.2}", self.em_mean)
    }

    pub fn f1_display(&self) -> String {
        format!("{:.2}", self.f1_mean)
    }

    pub fn rr_display(&self) -> String {
        format!("{:.2}", self.reject_rate)
    }
}

pub fn aggregate(items: &[ScoredItem], condition: &str) -> Result<MetricsSummary> {
    if items.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no scored items for condition {condition}"
        )));
    }
    if let Some(bad) = items.iter().find(|i| i.condition != condition) {
        return Err(Error::MixedConditions {
            expected: condition.to_owned(),
            found: bad.condition.clone(),
        });
    }
    let n = items.len() as f64;
    let em_sum: f64 = items.iter().map(|i| i.em as f64).sum();
    let f1_sum: f64 = items.iter().map(|i| i.f1).sum();
    Ok(MetricsSummary {
        condition: condition.to_owned(),
        n: items.len(),
        em_mean: 100.0 * em_sum / n,
        f1_mean: 100.0 * f1_sum / n,
        reject_rate: 100.0 * reject_rate(items)?,
        n_unparseable: items
            .iter()
            .filter(|i| i.parse_status == ItemStatus::Unparseable)
            .count(),
        n_generation_errors: items
            .iter()
            .filter(|i| i.parse_status == ItemStatus::GenerationError)
            .count(),
    })
}
