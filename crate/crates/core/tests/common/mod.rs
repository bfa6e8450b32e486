//! Reference implementations written without the library's code paths, and
//! seeded fixture generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use conote::corpus::{
    write_questions, write_retrieval_runs, Document, Question, RetrievalRun, RunMap,
};
use conote::noisemix::{Mixture, MixtureSpec, NoiseSource};
use conote::relevance::{LabeledDoc, LabeledRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// --- scoring oracle ---

/// Character-level normalization: lowercase, strip ASCII punctuation, then
/// drop article tokens while splitting on whitespace.
pub fn ref_tokens(s: &str) -> Vec<String> {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect()
}

pub fn ref_em(pred: &str, golds: &[&str]) -> u8 {
    let p = ref_tokens(pred).join(" ");
    u8::from(golds.iter().any(|g| ref_tokens(g).join(" ") == p))
}

/// Overlap by repeated search-and-remove rather than counting.
pub fn ref_overlap(pred: &[String], gold: &[String]) -> usize {
    let mut remaining: Vec<&String> = gold.iter().collect();
    let mut hits = 0;
    for t in pred {
        if let Some(i) = remaining.iter().position(|g| *g == t) {
            remaining.remove(i);
            hits += 1;
        }
    }
    hits
}

/// F1 as 2·overlap / (|pred| + |gold|), the closed form of 2PR/(P+R).
pub fn ref_f1(pred: &str, golds: &[&str]) -> f64 {
    let p = ref_tokens(pred);
    golds
        .iter()
        .map(|g| {
            let g = ref_tokens(g);
            match (p.is_empty(), g.is_empty()) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => 2.0 * ref_overlap(&p, &g) as f64 / (p.len() + g.len()) as f64,
            }
        })
        .fold(0.0, f64::max)
}

/// Handcrafted (prediction, golds) pairs covering articles, punctuation,
/// repeated tokens, multiple golds, casing and empty strings.
pub fn scoring_corpus() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("1996 Summer Olympics", vec!["1996"]),
        ("Malayalam", vec!["Malayalam"]),
        ("Paris", vec!["London"]),
        ("The Bamboo Flute.", vec!["bamboo flute"]),
        ("An  apple", vec!["apple"]),
        ("", vec![""]),
        ("", vec!["something"]),
        ("something", vec![""]),
        ("the", vec!["a"]),
        ("G. Sankara Kurup", vec!["G Sankara Kurup"]),
        ("Sankara Kurup", vec!["G. Sankara Kurup"]),
        ("Odakkuzhal (The Bamboo Flute)", vec!["Odakkuzhal"]),
        ("new york new york", vec!["new york"]),
        ("new york", vec!["new york new york"]),
        ("york new", vec!["new york"]),
        ("a b c d", vec!["c d e f"]),
        ("a b c d", vec!["b c d e", "x"]),
        ("one two three", vec!["four", "two three", "one"]),
        (
            "Barack Obama",
            vec!["Obama", "President Obama", "Barack Hussein Obama"],
        ),
        ("the the the", vec!["the"]),
        ("cat cat dog", vec!["cat dog dog"]),
        ("cat cat cat", vec!["cat"]),
        ("cat", vec!["cat cat cat"]),
        ("U.S.", vec!["US"]),
        ("U.S.A.", vec!["USA", "United States"]),
        ("United States of America", vec!["United States"]),
        ("rock 'n' roll", vec!["rock n roll"]),
        ("it's", vec!["its"]),
        ("A Tale of Two Cities", vec!["Tale of Two Cities"]),
        ("Tale of Two Cities", vec!["a tale of two cities"]),
        ("the answer", vec!["answer"]),
        ("Theodore", vec!["the odore"]),
        ("anthem", vec!["an them"]),
        ("apple, banana; cherry", vec!["apple banana cherry"]),
        ("apple banana", vec!["banana apple"]),
        ("42", vec!["forty-two", "42"]),
        ("forty-two", vec!["fortytwo"]),
        ("3.14", vec!["314"]),
        ("1,000", vec!["1000"]),
        ("July 4, 1776", vec!["4 July 1776"]),
        ("July 4 1776", vec!["July 1776"]),
        ("Mount Everest", vec!["Everest", "Mt. Everest"]),
        ("mt everest", vec!["Mt. Everest"]),
        ("  spaced   out  ", vec!["spaced out"]),
        ("TAB\tseparated", vec!["tab separated"]),
        ("line\nbreak", vec!["line break"]),
        ("Zoë", vec!["zoë"]),
        ("Zoe", vec!["Zoë"]),
        ("Ångström", vec!["ångström unit"]),
        ("São Paulo", vec!["Sao Paulo", "São Paulo"]),
        ("an a the", vec![""]),
        ("quick brown fox", vec!["the quick brown fox jumps"]),
        ("the quick brown fox jumps", vec!["quick brown fox"]),
        ("x y z", vec!["z y x"]),
        ("x x y", vec!["x y y", "x x"]),
        ("unknown", vec!["1996"]),
        ("I don't know", vec!["don't know"]),
        ("(parenthetical)", vec!["parenthetical"]),
        ("\"quoted\"", vec!["quoted"]),
        ("hyphen-ated words", vec!["hyphenated words"]),
    ]
}

// --- mixture oracle ---

pub fn labeled_doc(id: String, golden: bool) -> LabeledDoc {
    LabeledDoc {
        doc: Document {
            id: id.clone(),
            title: String::new(),
            text: if golden {
                format!("{id} contains GOLD")
            } else {
                format!("{id} is filler")
            },
            score: None,
        },
        is_golden: golden,
    }
}

/// A random labeled run of 0..=max_len documents, each golden with probability p.
pub fn random_labeled_run(rng: &mut ChaCha8Rng, qid: &str, max_len: usize) -> LabeledRun {
    let len = rng.random_range(0..=max_len);
    let p: f64 = rng.random_range(0.0..1.0);
    LabeledRun {
        question_id: qid.to_owned(),
        gold_answers: vec!["GOLD".into()],
        labeled_docs: (0..len)
            .map(|i| labeled_doc(format!("{qid}-r{i}"), rng.random_bool(p)))
            .collect(),
    }
}

/// The expected mixture, by filtering: the first `n_relevant` goldens and the
/// first `n_noisy` noisy documents of the run, kept in their run order.
pub fn expected_retrieval_ids(
    run: &LabeledRun,
    n_noisy: usize,
    n_relevant: usize,
) -> Option<Vec<String>> {
    let golden: Vec<usize> = (0..run.labeled_docs.len())
        .filter(|&i| run.labeled_docs[i].is_golden)
        .collect();
    let noisy: Vec<usize> = (0..run.labeled_docs.len())
        .filter(|&i| !run.labeled_docs[i].is_golden)
        .collect();
    if golden.len() < n_relevant || noisy.len() < n_noisy {
        return None;
    }
    let mut keep: Vec<usize> = golden[..n_relevant]
        .iter()
        .chain(&noisy[..n_noisy])
        .copied()
        .collect();
    keep.sort_unstable();
    Some(
        keep.into_iter()
            .map(|i| run.labeled_docs[i].doc.id.clone())
            .collect(),
    )
}

/// Checks one mixture against the invariants; returns a description of the
/// first violation.
pub fn verify_mixture(run: &LabeledRun, spec: &MixtureSpec, m: &Mixture) -> Result<(), String> {
    let n_noisy = ref_quota_noisy(spec.k, spec.noise_ratio);
    let n_relevant = spec.k - n_noisy;
    if m.docs.len() != spec.k {
        return Err(format!(
            "{}: {} docs, want {}",
            run.question_id,
            m.docs.len(),
            spec.k
        ));
    }
    if (m.n_noisy, m.n_relevant) != (n_noisy, n_relevant) {
        return Err(format!(
            "{}: quota {:?}",
            run.question_id,
            (m.n_noisy, m.n_relevant)
        ));
    }
    let golden = m
        .docs
        .iter()
        .filter(|d| d.doc.text.contains("GOLD"))
        .count();
    if golden != n_relevant || m.docs.iter().filter(|d| d.is_golden).count() != n_relevant {
        return Err(format!(
            "{}: {golden} golden, want {n_relevant}",
            run.question_id
        ));
    }
    let ids: Vec<&str> = m.docs.iter().map(|d| d.doc.id.as_str()).collect();
    if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
        return Err(format!("{}: duplicate ids", run.question_id));
    }
    let run_ids: Vec<&str> = run.labeled_docs.iter().map(|d| d.doc.id.as_str()).collect();
    match spec.noise_source {
        NoiseSource::Retrieval => {
            // Subsequence check by two pointers.
            let mut it = run_ids.iter();
            if !ids.iter().all(|id| it.any(|r| r == id)) {
                return Err(format!("{}: not a rank-order subsequence", run.question_id));
            }
            let want = expected_retrieval_ids(run, n_noisy, n_relevant)
                .ok_or("built an unfillable mixture")?;
            if ids != want.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(format!("{}: {ids:?} != {want:?}", run.question_id));
            }
        }
        NoiseSource::Random => {
            let (from_run, fillers): (Vec<_>, Vec<_>) = m
                .docs
                .iter()
                .partition(|d| run_ids.contains(&d.doc.id.as_str()));
            if from_run.len() != n_relevant || from_run.iter().any(|d| !d.is_golden) {
                return Err(format!(
                    "{}: run documents must be exactly the goldens",
                    run.question_id
                ));
            }
            if fillers
                .iter()
                .any(|d| d.is_golden || d.doc.text.contains("GOLD"))
            {
                return Err(format!("{}: golden filler", run.question_id));
            }
        }
    }
    Ok(())
}

/// Round-half-up of k·r, computed in exact rationals over hundredths.
pub fn ref_quota_noisy(k: usize, r: f64) -> usize {
    let hundredths = (r * 100.0).round() as usize;
    ((k * hundredths + 50) / 100).min(k)
}

// --- pipeline fixtures ---

pub const FIXTURE_ANSWERS: [&str; 6] = [
    "1996",
    "Malayalam",
    "Paris",
    "Jupiter",
    "Amundsen",
    "oxygen",
];

/// Six questions whose runs each hold five golden and five noisy passages,
/// interleaved starting with a noisy one.
pub fn pipeline_fixture() -> (Vec<Question>, RunMap) {
    let mut questions = Vec::new();
    let mut runs = BTreeMap::new();
    for (i, a) in FIXTURE_ANSWERS.iter().enumerate() {
        let id = format!("q{i}");
        questions.push(Question {
            id: id.clone(),
            text: format!("Which fixture answer belongs to item {i}?"),
            gold_answers: vec![(*a).to_owned()],
        });
        let docs = (0..10)
            .map(|j| Document {
                id: format!("{id}-d{j}"),
                title: format!("Title {j}"),
                text: if j % 2 == 1 {
                    format!("Item {i} is associated with {a} according to records.")
                } else {
                    format!("Item {i} has an unrelated description number {j}.")
                },
                score: Some(100.0 - j as f64),
            })
            .collect();
        runs.insert(
            id.clone(),
            RetrievalRun {
                question_id: id,
                ranked_docs: docs,
            },
        );
    }
    (questions, runs)
}

pub fn write_pipeline_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (q, r) = pipeline_fixture();
    let qp = dir.join("questions.jsonl");
    let rp = dir.join("runs.jsonl");
    write_questions(&qp, &q).unwrap();
    write_retrieval_runs(&rp, &r).unwrap();
    (qp, rp)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
