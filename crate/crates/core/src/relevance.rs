//! Golden-document labeling, retrieval recall, and the robustness subset.
//!
//! A document is golden for a question when its normalized text contains a
//! normalized gold answer as a run of whole tokens (the usual `has_answer`
//! test of open-domain QA retrieval evaluation).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Question, RetrievalRun, RunMap};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::contains_normalized;

pub fn is_golden(doc: &Document, gold_answers: &[String]) -> bool {
    gold_answers
        .iter()
        .any(|a| contains_normalized(&doc.text, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDoc {
    pub doc: Document,
    pub is_golden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRun {
    pub question_id: String,
    /// Gold answers the labels were computed from.
    pub gold_answers: Vec<String>,
    pub labeled_docs: Vec<LabeledDoc>,
}

impl LabeledRun {
    pub fn n_golden(&self) -> usize {
        self.labeled_docs.iter().filter(|d| d.is_golden).count()
    }

    pub fn n_noisy(&self) -> usize {
        self.labeled_docs.len() - self.n_golden()
    }
}

pub fn label_run(run: &RetrievalRun, question: &Question) -> Result<LabeledRun> {
    if run.question_id != question.id {
        return Err(Error::QuestionMismatch {
            run: run.question_id.clone(),
            question: question.id.clone(),
        });
    }
    Ok(LabeledRun {
        question_id: question.id.clone(),
        gold_answers: question.gold_answers.clone(),
        labeled_docs: run
            .ranked_docs
            .iter()
            .map(|d| LabeledDoc {
                is_golden: is_golden(d, &question.gold_answers),
                doc: d.clone(),
            })
            .collect(),
    })
}

/// Labels every question that has a run. Questions without one are skipped.
pub fn label_runs(runs: &RunMap, questions: &[Question]) -> Result<BTreeMap<String, LabeledRun>> {
    questions
        .iter()
        .filter_map(|q| runs.get(&q.id).map(|r| (q, r)))
        .map(|(q, r)| Ok((q.id.clone(), label_run(r, q)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Top(usize),
    All,
}

impl std::str::FromStr for Depth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Depth::All);
        }
        s.parse::<usize>()
            .map(Depth::Top)
            .map_err(|_| format!("depth must be an integer or \"all\", got {s:?}"))
    }
}

/// Recall as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallCounts {
    pub hits: usize,
    pub total: usize,
}

impl RecallCounts {
    pub fn value(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

pub fn recall_counts(runs: &RunMap, questions: &[Question], depth: Depth) -> Result<RecallCounts> {
    if questions.is_empty() {
        return Err(Error::InvalidInput(
            "recall over an empty question set".into(),
        ));
    }
    let mut hits = 0;
    for q in questions {
        let run = runs
            .get(&q.id)
            .ok_or_else(|| Error::MissingRun(q.id.clone()))?;
        let limit = match depth {
            Depth::Top(n) => n,
            Depth::All => usize::MAX,
        };
        if run
            .ranked_docs
            .iter()
            .take(limit)
            .any(|d| is_golden(d, &q.gold_answers))
        {
            hits += 1;
        }
    }
    Ok(RecallCounts {
        hits,
        total: questions.len(),
    })
}

/// Fraction of questions whose top-`depth` documents include a golden one.
pub fn retrieval_recall(runs: &RunMap, questions: &[Question], depth: Depth) -> Result<f64> {
    recall_counts(runs, questions, depth).map(|c| c.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MissingRun,
    TooFewGolden,
    TooFewNoisy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub question_id: String,
    pub n_golden: usize,
    pub n_noisy: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetExclusion {
    pub question_id: String,
    pub reason: ExclusionReason,
    pub n_golden: usize,
    pub n_noisy: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RobustnessSubset {
    pub entries: Vec<SubsetEntry>,
    pub excluded: Vec<SubsetExclusion>,
    pub full_size: usize,
    pub subset_size: usize,
}

impl RobustnessSubset {
    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.question_id.as_str())
    }

    pub fn excluded_ids(&self) -> impl Iterator<Item = &str> {
        self.excluded.iter().map(|e| e.question_id.as_str())
    }

    pub fn write(&self, subset_path: &Path, exclusions_path: &Path) -> Result<()> {
        jsonl::write_all(subset_path, &self.entries)?;
        jsonl::write_all(exclusions_path, &self.excluded)
    }

    /// Reads a subset back. The exclusions file is optional; without it
    /// `full_size` equals the subset size.
    pub fn read(subset_path: &Path, exclusions_path: Option<&Path>) -> Result<Self> {
        let entries: Vec<SubsetEntry> = jsonl::read_all(subset_path)?;
        let excluded: Vec<SubsetExclusion> = match exclusions_path {
            Some(p) => jsonl::read_all(p)?,
            None => Vec::new(),
        };
        Ok(RobustnessSubset {
            full_size: entries.len() + excluded.len(),
            subset_size: entries.len(),
            entries,
            excluded,
        })
    }
}

/// Keeps the questions whose run holds at least `min_golden` golden and
/// `min_noisy` noisy documents, in question order.
pub fn build_robustness_subset(
    runs: &RunMap,
    questions: &[Question],
    min_golden: usize,
    min_noisy: usize,
) -> Result<RobustnessSubset> {
    if min_golden < 1 {
        return Err(Error::InvalidInput("min_golden must be ≥ 1".into()));
    }
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for q in questions {
        let Some(run) = runs.get(&q.id) else {
            excluded.push(SubsetExclusion {
                question_id: q.id.clone(),
                reason: ExclusionReason::MissingRun,
                n_golden: 0,
                n_noisy: 0,
            });
            continue;
        };
        let n_golden = run
            .ranked_docs
            .iter()
            .filter(|d| is_golden(d, &q.gold_answers))
            .count();
        let n_noisy = run.ranked_docs.len() - n_golden;
        let reason = if n_golden < min_golden {
            Some(ExclusionReason::TooFewGolden)
        } else if n_noisy < min_noisy {
            Some(ExclusionReason::TooFewNoisy)
        } else {
            None
        };
        match reason {
            Some(reason) => excluded.push(SubsetExclusion {
                question_id: q.id.clone(),
                reason,
                n_golden,
                n_noisy,
            }),
            None => entries.push(SubsetEntry {
                question_id: q.id.clone(),
                n_golden,
                n_noisy,
            }),
        }
    }
    Ok(RobustnessSubset {
        subset_size: entries.len(),
        full_size: questions.len(),
        entries,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            text: text.into(),
            score: None,
        }
    }

    fn question(id: &str, golds: &[&str]) -> Question {
        Question {
            id: id.into(),
            text: format!("question {id}"),
            gold_answers: golds.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn run(qid: &str, texts: &[&str]) -> RetrievalRun {
        RetrievalRun {
            question_id: qid.into(),
            ranked_docs: texts
                .iter()
                .enumerate()
                .map(|(i, t)| doc(&format!("{qid}-d{i}"), t))
                .collect(),
        }
    }

    /// Three questions; q2 has no golden document anywhere.
    fn fixture() -> (RunMap, Vec<Question>) {
        let qs = vec![
            question("q1", &["1996"]),
            question("q2", &["Malayalam"]),
            question("q3", &["Paris"]),
        ];
        let mut runs = RunMap::new();
        for r in [
            run(
                "q1",
                &[
                    "Chicago's 2016 bid",
                    "The 1996 Olympics are the most recent",
                ],
            ),
            run("q2", &["Kannada poets", "Bengali authors"]),
            run("q3", &["Paris is the capital", "London", "paris, france"]),
        ] {
            runs.insert(r.question_id.clone(), r);
        }
        (runs, qs)
    }

    #[test]
    fn golden_examples() {
        let golds = vec!["1996".to_string()];
        assert!(is_golden(
            &doc(
                "a",
                "The 1996 Olympics are the most recent edition of the Summer Olympics"
            ),
            &golds
        ));
        assert!(!is_golden(
            &doc("b", "Chicago's 2016 Summer Olympics bid"),
            &golds
        ));
        assert!(is_golden(&doc("c", "1996"), &golds));
    }

    #[test]
    fn label_run_preserves_order() {
        let q = question("q", &["Paris"]);
        let r = run("q", &["Paris is here", "nothing", "visit PARIS."]);
        let labeled = label_run(&r, &q).unwrap();
        let labels: Vec<_> = labeled.labeled_docs.iter().map(|d| d.is_golden).collect();
        assert_eq!(labels, [true, false, true]);
        assert_eq!(labeled.labeled_docs[1].doc.id, "q-d1");

        let empty = label_run(&run("q", &[]), &q).unwrap();
        assert!(empty.labeled_docs.is_empty());

        assert!(matches!(
            label_run(&run("other", &[]), &q),
            Err(Error::QuestionMismatch { .. })
        ));
    }

    #[test]
    fn recall_counts_fixture() {
        let (runs, qs) = fixture();
        let r = retrieval_recall(&runs, &qs, Depth::All).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-9);
        // q1's golden doc sits at rank 2.
        let top1 = recall_counts(&runs, &qs, Depth::Top(1)).unwrap();
        assert_eq!(top1, RecallCounts { hits: 1, total: 3 });
    }

    #[test]
    fn recall_missing_run_names_question() {
        let (mut runs, qs) = fixture();
        runs.remove("q3");
        assert_eq!(
            retrieval_recall(&runs, &qs, Depth::All)
                .unwrap_err()
                .to_string(),
            "no retrieval run for question q3"
        );
    }

    #[test]
    fn subset_thresholds() {
        let (runs, qs) = fixture();
        let s = build_robustness_subset(&runs, &qs, 1, 0).unwrap();
        assert_eq!(s.subset_size, 2);
        assert_eq!(s.excluded.len(), 1);
        assert_eq!(s.excluded[0].question_id, "q2");
        assert_eq!(s.excluded[0].reason, ExclusionReason::TooFewGolden);
        assert_eq!(s.subset_size + s.excluded.len(), s.full_size);

        let s = build_robustness_subset(&runs, &qs, 5, 0).unwrap();
        assert_eq!(s.subset_size, 0);
        assert_eq!(s.excluded.len(), 3);

        let s = build_robustness_subset(&runs, &qs[..1], 1, 1).unwrap();
        assert_eq!(s.excluded.len(), 0);
        assert_eq!(s.entries[0].n_noisy, 1);
    }

    #[test]
    fn subset_round_trips_through_files() {
        let (runs, qs) = fixture();
        let s = build_robustness_subset(&runs, &qs, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (
            dir.path().join("subset.jsonl"),
            dir.path().join("excl.jsonl"),
        );
        s.write(&a, &b).unwrap();
        assert_eq!(RobustnessSubset::read(&a, Some(&b)).unwrap(), s);
    }

    #[test]
    fn depth_parsing() {
        assert_eq!("all".parse::<Depth>().unwrap(), Depth::All);
        assert_eq!("20".parse::<Depth>().unwrap(), Depth::Top(20));
        assert!("x".parse::<Depth>().is_err());
    }
}
