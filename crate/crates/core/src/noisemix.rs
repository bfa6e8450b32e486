//! Top-k document mixtures at a prescribed noise ratio.
//!
//! The builder walks a labeled run in rank order, filling a relevant list
//! with golden documents and a noisy list with non-golden ones; each list
//! stops accepting documents once its quota is met. For the random-noise
//! scenario the noisy list is instead filled from the document store.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DocumentStore;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::relevance::{is_golden, LabeledDoc, LabeledRun, RobustnessSubset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Retrieval,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub k: usize,
    pub noise_ratio: f64,
    pub noise_source: NoiseSource,
    /// Only consulted for the random source.
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(k: usize, noise_ratio: f64, noise_source: NoiseSource, seed: u64) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidInput("k must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&noise_ratio) {
            return Err(Error::InvalidInput(format!(
                "noise ratio {noise_ratio} outside [0, 1]"
            )));
        }
        Ok(Self {
            k,
            noise_ratio,
            noise_source,
            seed,
        })
    }

    pub fn quota(&self) -> (usize, usize) {
        quota(self.k, self.noise_ratio)
    }
}

/// Splits `k` into `(n_noisy, n_relevant)` with `n_noisy = round_half_up(k·r)`.
///
/// A 1e-9 slack absorbs binary representation error so that products like
/// `5 × 0.7` land on the intended half.
pub fn quota(k: usize, r: f64) -> (usize, usize) {
    let n_noisy = ((k as f64 * r) + 0.5 + 1e-9).floor() as usize;
    let n_noisy = n_noisy.min(k);
    (n_noisy, k - n_noisy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub question_id: String,
    pub docs: Vec<LabeledDoc>,
    pub n_noisy: usize,
    pub n_relevant: usize,
}

/// Audit form of a mixture: `{question_id, condition, doc_ids, labels}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub question_id: String,
    pub condition: String,
    pub doc_ids: Vec<String>,
    pub labels: Vec<bool>,
}

impl Mixture {
    pub fn record(&self, condition: &str) -> MixtureRecord {
        MixtureRecord {
            question_id: self.question_id.clone(),
            condition: condition.to_owned(),
            doc_ids: self.docs.iter().map(|d| d.doc.id.clone()).collect(),
            labels: self.docs.iter().map(|d| d.is_golden).collect(),
        }
    }
}

/// Per-question seed for random fillers, so that questions in one
/// condition do not all share a single permutation of the store.
pub fn question_seed(seed: u64, question_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(question_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn build_mixture(
    labeled: &LabeledRun,
    spec: &MixtureSpec,
    store: Option<&DocumentStore>,
) -> Result<Mixture> {
    let (n_noisy, n_relevant) = spec.quota();
    let noisy_from_run = match spec.noise_source {
        NoiseSource::Retrieval => n_noisy,
        NoiseSource::Random => 0,
    };

    let mut relevant = 0;
    let mut noisy = 0;
    let mut docs = Vec::with_capacity(spec.k);
    for d in &labeled.labeled_docs {
        if relevant == n_relevant && noisy == noisy_from_run {
            break;
        }
        if d.is_golden && relevant < n_relevant {
            relevant += 1;
            docs.push(d.clone());
        } else if !d.is_golden && noisy < noisy_from_run {
            noisy += 1;
            docs.push(d.clone());
        }
    }

    let unfillable = |noisy_needed, noisy_available| Error::QuotaUnfillable {
        question_id: labeled.question_id.clone(),
        relevant_needed: n_relevant,
        relevant_available: labeled.n_golden(),
        noisy_needed,
        noisy_available,
    };

    match spec.noise_source {
        NoiseSource::Retrieval => {
            if relevant < n_relevant || noisy < n_noisy {
                return Err(unfillable(n_noisy, labeled.n_noisy()));
            }
        }
        NoiseSource::Random => {
            let store = store.ok_or_else(|| {
                Error::Config("random noise source requires a document store".into())
            })?;
            let run_ids: HashSet<String> = labeled
                .labeled_docs
                .iter()
                .map(|d| d.doc.id.clone())
                .collect();
            let fillers: Vec<_> = store
                .shuffled(question_seed(spec.seed, &labeled.question_id), &run_ids)
                .filter(|d| !is_golden(d, &labeled.gold_answers))
                .take(n_noisy)
                .collect();
            if relevant < n_relevant || fillers.len() < n_noisy {
                let available = store
                    .documents()
                    .iter()
                    .filter(|d| !run_ids.contains(&d.id) && !is_golden(d, &labeled.gold_answers))
                    .count();
                return Err(unfillable(n_noisy, available));
            }
            docs.extend(fillers.into_iter().map(|d| LabeledDoc {
                doc: d.clone(),
                is_golden: false,
            }));
        }
    }

    Ok(Mixture {
        question_id: labeled.question_id.clone(),
        docs,
        n_noisy,
        n_relevant,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureExclusion {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBatch {
    /// In subset order.
    pub mixtures: Vec<Mixture>,
    pub excluded: Vec<MixtureExclusion>,
}

impl ConditionBatch {
    pub fn write_records(&self, path: &Path, condition: &str) -> Result<()> {
        let records: Vec<_> = self.mixtures.iter().map(|m| m.record(condition)).collect();
        jsonl::write_all(path, &records)
    }
}

/// Builds one mixture per subset question; failures are collected, not raised.
pub fn build_condition_batch(
    subset: &RobustnessSubset,
    labeled_runs: &BTreeMap<String, LabeledRun>,
    spec: &MixtureSpec,
    store: Option<&DocumentStore>,
) -> Result<ConditionBatch> {
    if subset.entries.is_empty() {
        return Err(Error::InvalidInput("robustness subset is empty".into()));
    }
    let mut mixtures = Vec::new();
    let mut excluded = Vec::new();
    for qid in subset.question_ids() {
        let Some(labeled) = labeled_runs.get(qid) else {
            excluded.push(MixtureExclusion {
                question_id: qid.to_owned(),
                reason: "missing run".into(),
            });
            continue;
        };
        match build_mixture(labeled, spec, store) {
            Ok(m) => mixtures.push(m),
            Err(e @ Error::QuotaUnfillable { .. }) => excluded.push(MixtureExclusion {
                question_id: qid.to_owned(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(ConditionBatch { mixtures, excluded })
}
