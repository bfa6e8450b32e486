//! Experiment orchestration: mixtures to prompts to generations to scores,
//! with cache-backed resumption, condition grids, and table reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condition::{ExperimentCondition, NoiseSetting, PromptMode};
use crate::corpus::{
    load_document_store, load_questions, load_retrieval_runs, Document, DocumentStore, Question,
    RunMap,
};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::llm::{
    generate_batch, Backend, CachedBackend, GenerationRequest, GenerationResponse, ResponseCache,
};
use crate::metrics::{aggregate, ItemStatus, MetricsSummary, RejectScoring, ScoredItem};
use crate::noisemix::{build_condition_batch, MixtureExclusion, MixtureSpec};
use crate::notes::{classify_reject, parse_con_output, parse_standard_output, RejectLexicon};
use crate::prompt::{AssembledPrompt, PromptTemplate};
use crate::relevance::{build_robustness_subset, label_runs, LabeledRun, RobustnessSubset};

pub const SCORED_ITEMS_FILE: &str = "scored_items.jsonl";
pub const EXCLUSIONS_FILE: &str = "exclusions.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPaths {
    pub questions: PathBuf,
    pub runs: Option<PathBuf>,
    /// Document store for the random-noise source.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Precomputed robustness subset; computed from the thresholds when absent.
    #[serde(default)]
    pub subset: Option<PathBuf>,
    #[serde(default)]
    pub subset_exclusions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetThresholds {
    pub min_golden: usize,
    pub min_noisy: usize,
}

impl Default for SubsetThresholds {
    fn default() -> Self {
        Self {
            min_golden: 1,
            min_noisy: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSettings {
    /// Overrides the per-mode token budget.
    #[serde(default)]
    pub max_new_tokens: Option<u32>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: None,
            max_in_flight: default_in_flight(),
        }
    }
}

/// One experiment, as read from a TOML file:
///
/// ```toml
/// [condition]
/// dataset = "nq"
/// k = 5
/// noise_ratio = 0.2
/// noise_source = "retrieval"
/// prompt_mode = "con"
/// model_name = "llama-2-7b-con"
/// seed = 0
///
/// [inputs]
/// questions = "data/nq_test.jsonl"
/// runs = "data/nq_dpr.jsonl"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub condition: ExperimentCondition,
    pub inputs: InputPaths,
    #[serde(default)]
    pub subset: SubsetThresholds,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub reject_scoring: RejectScoring,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.condition.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 over the canonical JSON of the config and the versions of
    /// the bundled templates and reject lexicon.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for version in template_versions().values() {
            h.update([0]);
            h.update(version.as_bytes());
        }
        h.update([0]);
        h.update(RejectLexicon::builtin().version.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn with_condition(&self, condition: ExperimentCondition) -> Self {
        Self {
            condition,
            ..self.clone()
        }
    }
}

fn template_versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("standard".to_owned(), PromptTemplate::standard().version),
        ("con".to_owned(), PromptTemplate::con().version),
    ])
}

/// Loaded inputs shared by every condition of a grid.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub questions: Vec<Question>,
    pub runs: RunMap,
    pub labeled: BTreeMap<String, LabeledRun>,
    pub store: Option<DocumentStore>,
    pub subset: Option<RobustnessSubset>,
}

impl PreparedInputs {
    pub fn load(paths: &InputPaths, thresholds: SubsetThresholds) -> Result<Self> {
        let questions = load_questions(&paths.questions)?;
        let runs = match &paths.runs {
            Some(p) => load_retrieval_runs(p)?,
            None => RunMap::new(),
        };
        let store = paths.corpus.as_ref().map(load_document_store).transpose()?;
        let subset = match &paths.subset {
            Some(p) => Some(RobustnessSubset::read(
                p,
                paths.subset_exclusions.as_deref(),
            )?),
            None => None,
        };
        Self::new(questions, runs, store, subset, thresholds)
    }

    /// Without an explicit subset, one is computed from the thresholds
    /// whenever runs are available.
    pub fn new(
        questions: Vec<Question>,
        runs: RunMap,
        store: Option<DocumentStore>,
        subset: Option<RobustnessSubset>,
        thresholds: SubsetThresholds,
    ) -> Result<Self> {
        let labeled = label_runs(&runs, &questions)?;
        let subset = match subset {
            Some(s) => Some(s),
            None if !runs.is_empty() => Some(build_robustness_subset(
                &runs,
                &questions,
                thresholds.min_golden,
                thresholds.min_noisy,
            )?),
            None => None,
        };
        Ok(Self {
            questions,
            runs,
            labeled,
            store,
            subset,
        })
    }

    fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub condition_id: String,
    pub condition: ExperimentCondition,
    pub config_digest: String,
    pub template_versions: BTreeMap<String, String>,
    pub reject_lexicon_version: String,
    pub k: usize,
    pub subset_thresholds: SubsetThresholds,
    pub reject_scoring: RejectScoring,
    pub backend_id: String,
    pub started_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub n_hard_errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub scored_items_path: PathBuf,
    pub exclusions_path: PathBuf,
    pub summary: MetricsSummary,
    pub metadata: RunMetadata,
}

impl RunArtifacts {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let read_json = |name: &str| -> Result<serde_json::Value> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&text)?)
        };
        let summary = serde_json::from_value(read_json(SUMMARY_FILE)?)?;
        let metadata = serde_json::from_value(read_json(METADATA_FILE)?)?;
        Ok(Self {
            scored_items_path: dir.join(SCORED_ITEMS_FILE),
            exclusions_path: dir.join(EXCLUSIONS_FILE),
            dir,
            summary,
            metadata,
        })
    }

    pub fn scored_items(&self) -> Result<Vec<ScoredItem>> {
        jsonl::read_all(&self.scored_items_path)
    }

    pub fn exclusions(&self) -> Result<Vec<MixtureExclusion>> {
        jsonl::read_all(&self.exclusions_path)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Refuses to reuse a directory that holds a run of a different config.
fn claim_dir(dir: &Path, digest: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let existing: serde_json::Value = serde_json::from_str(&text)?;
    let existing = existing["config_digest"].as_str().unwrap_or_default();
    if existing != digest {
        return Err(Error::ConfigDigestMismatch {
            dir: dir.to_path_buf(),
            existing: existing.to_owned(),
            requested: digest.to_owned(),
        });
    }
    Ok(())
}

struct Job<'a> {
    question: &'a Question,
    k: usize,
    prompt: AssembledPrompt,
}

fn build_jobs<'a>(
    config: &ExperimentConfig,
    inputs: &'a PreparedInputs,
) -> Result<(Vec<Job<'a>>, Vec<MixtureExclusion>)> {
    let cond = &config.condition;
    let standard = PromptTemplate::standard();
    let con = PromptTemplate::con();
    let render = |q: &Question, docs: &[Document]| -> Result<AssembledPrompt> {
        match cond.prompt_mode {
            PromptMode::Standard => Ok(standard.render_standard(q, docs)),
            PromptMode::Con => con.render_con(q, docs),
            PromptMode::ClosedBook => Ok(standard.render_standard(q, &[])),
        }
    };
    let mut jobs = Vec::new();
    let mut excluded = Vec::new();

    if cond.prompt_mode == PromptMode::ClosedBook {
        for q in &inputs.questions {
            jobs.push(Job {
                question: q,
                k: 0,
                prompt: render(q, &[])?,
            });
        }
        return Ok((jobs, excluded));
    }

    match cond.noise_source.mixture_source() {
        None => {
            for q in &inputs.questions {
                let Some(run) = inputs.runs.get(&q.id) else {
                    excluded.push(MixtureExclusion {
                        question_id: q.id.clone(),
                        reason: "missing run".into(),
                    });
                    continue;
                };
                let docs: Vec<Document> = run.ranked_docs.iter().take(cond.k).cloned().collect();
                if docs.is_empty() && cond.prompt_mode == PromptMode::Con {
                    excluded.push(MixtureExclusion {
                        question_id: q.id.clone(),
                        reason: "no passages".into(),
                    });
                    continue;
                }
                jobs.push(Job {
                    question: q,
                    k: docs.len(),
                    prompt: render(q, &docs)?,
                });
            }
        }
        Some(source) => {
            let subset = inputs.subset.as_ref().ok_or_else(|| {
                Error::Config("noise conditions need retrieval runs or a subset".into())
            })?;
            let spec = MixtureSpec::new(cond.k, cond.noise_ratio, source, cond.seed)?;
            let batch =
                build_condition_batch(subset, &inputs.labeled, &spec, inputs.store.as_ref())?;
            excluded = batch.excluded;
            for m in batch.mixtures {
                let q = inputs
                    .question(&m.question_id)
                    .ok_or_else(|| Error::QuestionMismatch {
                        run: m.question_id.clone(),
                        question: "<absent from question file>".into(),
                    })?;
                let docs: Vec<Document> = m.docs.into_iter().map(|d| d.doc).collect();
                jobs.push(Job {
                    question: q,
                    k: docs.len(),
                    prompt: render(q, &docs)?,
                });
            }
        }
    }
    Ok((jobs, excluded))
}

fn score_response(
    cond: &ExperimentCondition,
    condition_id: &str,
    job: &Job<'_>,
    resp: Result<GenerationResponse>,
    rule: RejectScoring,
) -> ScoredItem {
    let golds = &job.question.gold_answers;
    let qid = &job.question.id;
    let text = match resp {
        Ok(r) if !r.is_error() => r.text.unwrap_or_default(),
        Ok(r) => {
            tracing::warn!(question_id = %qid, error = ?r.error, "generation failed");
            return ScoredItem::score(
                qid,
                condition_id,
                "",
                golds,
                false,
                ItemStatus::GenerationError,
                rule,
            );
        }
        Err(e) => {
            tracing::warn!(question_id = %qid, error = %e, "generation failed");
            return ScoredItem::score(
                qid,
                condition_id,
                "",
                golds,
                false,
                ItemStatus::GenerationError,
                rule,
            );
        }
    };
    let (pred, is_reject, status) = match cond.prompt_mode {
        PromptMode::Con => match parse_con_output(&text, job.k) {
            Ok(p) => (p.final_answer, p.is_reject, p.parse_status.into()),
            Err(_) => (String::new(), false, ItemStatus::Unparseable),
        },
        PromptMode::Standard | PromptMode::ClosedBook => match parse_standard_output(&text) {
            Some(a) => {
                let reject = classify_reject(&a);
                (a, reject, ItemStatus::Raw)
            }
            None => (String::new(), false, ItemStatus::Unparseable),
        },
    };
    ScoredItem::score(qid, condition_id, &pred, golds, is_reject, status, rule)
}

/// Runs one condition end to end and writes its artifacts into `out_dir`.
///
/// Re-running into the same directory with the same config resumes: cached
/// generations are reused and the artifacts are rewritten identically.
pub fn run_experiment<B: Backend + ?Sized>(
    config: &ExperimentConfig,
    inputs: &PreparedInputs,
    backend: &B,
    cache: Option<&ResponseCache>,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts> {
    let out_dir = out_dir.as_ref();
    let cond = &config.condition;
    cond.validate()?;
    let digest = config.digest();
    claim_dir(out_dir, &digest)?;
    let condition_id = cond.id();

    let mut metadata = RunMetadata {
        condition_id: condition_id.clone(),
        condition: cond.clone(),
        config_digest: digest,
        template_versions: template_versions(),
        reject_lexicon_version: RejectLexicon::builtin().version.clone(),
        k: cond.k,
        subset_thresholds: config.subset,
        reject_scoring: config.reject_scoring,
        backend_id: backend.id().to_owned(),
        started_at_unix: unix_now(),
        finished_at_unix: None,
        n_scored: 0,
        n_excluded: 0,
        n_hard_errors: 0,
    };
    write_json(&out_dir.join(METADATA_FILE), &metadata)?;

    let (jobs, excluded) = build_jobs(config, inputs)?;
    let requests: Vec<GenerationRequest> = jobs
        .iter()
        .map(|j| {
            let mut r = GenerationRequest::new(j.prompt.clone(), cond.model_name.clone());
            if let Some(n) = config.generation.max_new_tokens {
                r.max_new_tokens = n;
            }
            r
        })
        .collect();
    tracing::info!(condition = %condition_id, n = requests.len(), excluded = excluded.len(), "running condition");

    let responses = match cache {
        Some(c) => generate_batch(
            &CachedBackend::new(c, backend),
            &requests,
            config.generation.max_in_flight,
        ),
        None => generate_batch(backend, &requests, config.generation.max_in_flight),
    };
    let items: Vec<ScoredItem> = jobs
        .iter()
        .zip(responses)
        .map(|(job, resp)| score_response(cond, &condition_id, job, resp, config.reject_scoring))
        .collect();

    let scored_items_path = out_dir.join(SCORED_ITEMS_FILE);
    let exclusions_path = out_dir.join(EXCLUSIONS_FILE);
    jsonl::write_all(&scored_items_path, &items)?;
    jsonl::write_all(&exclusions_path, &excluded)?;
    let summary = aggregate(&items, &condition_id)?;
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;

    metadata.finished_at_unix = Some(unix_now());
    metadata.n_scored = items.len();
    metadata.n_excluded = excluded.len();
    metadata.n_hard_errors = summary.n_generation_errors;
    write_json(&out_dir.join(METADATA_FILE), &metadata)?;

    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        scored_items_path,
        exclusions_path,
        summary,
        metadata,
    })
}

#[derive(Debug)]
pub struct GridCell {
    pub condition: ExperimentCondition,
    pub result: Result<RunArtifacts>,
}

/// Runs every (ratio, mode) pair of `base` into `out_root/<condition slug>`.
/// A failing cell is recorded and the grid moves on.
pub fn run_grid<B: Backend + ?Sized>(
    base: &ExperimentConfig,
    ratios: &[f64],
    modes: &[PromptMode],
    inputs: &PreparedInputs,
    backend: &B,
    cache: Option<&ResponseCache>,
    out_root: impl AsRef<Path>,
) -> Result<Vec<GridCell>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidInput(format!(
            "noise ratio {r} outside [0, 1]"
        )));
    }
    let mut cells = Vec::with_capacity(ratios.len() * modes.len());
    for &noise_ratio in ratios {
        for &prompt_mode in modes {
            let condition = ExperimentCondition {
                noise_ratio,
                prompt_mode,
                ..base.condition.clone()
            };
            let config = base.with_condition(condition.clone());
            let dir = out_root.as_ref().join(condition.slug());
            let result = run_experiment(&config, inputs, backend, cache, &dir);
            if let Err(e) = &result {
                tracing::error!(condition = %condition, error = %e, "grid cell failed");
            }
            cells.push(GridCell { condition, result });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub model: String,
    pub k: String,
    pub noise_source: String,
    pub noise_ratio: String,
    pub em: String,
    pub f1: String,
    pub rr: String,
    pub n: String,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Difference of two displayed values, e.g. `(+7.55)`.
pub fn format_delta(con: f64, standard: f64) -> String {
    let d = round2(con) - round2(standard);
    let d = if d.abs() < 0.005 { 0.0 } else { d };
    format!("({d:+.2})")
}

fn ratio_label(cond: &ExperimentCondition) -> String {
    if cond.prompt_mode == PromptMode::ClosedBook || cond.noise_source == NoiseSetting::None {
        "-".into()
    } else {
        format!("{:.0}%", cond.noise_ratio * 100.0)
    }
}

/// Builds the report rows: one per artifact, sorted by noise ratio from
/// highest to lowest, with a delta row after each ratio that has both a
/// standard and a chain-of-note run.
pub fn report_rows(artifacts: &[RunArtifacts]) -> Result<Vec<ReportRow>> {
    if artifacts.is_empty() {
        return Err(Error::InvalidInput("no run artifacts to report".into()));
    }
    let datasets: BTreeSet<&str> = artifacts
        .iter()
        .map(|a| a.metadata.condition.dataset.as_str())
        .collect();
    if datasets.len() > 1 {
        return Err(Error::InvalidInput(format!(
            "artifacts mix datasets: {}",
            datasets.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut sorted: Vec<&RunArtifacts> = artifacts.iter().collect();
    let group_key = |a: &RunArtifacts| {
        let c = &a.metadata.condition;
        let ratio = if ratio_label(c) == "-" {
            -1.0
        } else {
            c.noise_ratio
        };
        (
            std::cmp::Reverse(ordered(ratio)),
            c.noise_source.as_str(),
            c.k,
            c.model_name.clone(),
        )
    };
    let mode_rank = |m: PromptMode| match m {
        PromptMode::ClosedBook => 0,
        PromptMode::Standard => 1,
        PromptMode::Con => 2,
    };
    sorted.sort_by(|a, b| {
        group_key(a).cmp(&group_key(b)).then(
            mode_rank(a.metadata.condition.prompt_mode)
                .cmp(&mode_rank(b.metadata.condition.prompt_mode)),
        )
    });

    let row = |a: &RunArtifacts| {
        let c = &a.metadata.condition;
        ReportRow {
            system: c.prompt_mode.as_str().to_owned(),
            model: c.model_name.clone(),
            k: if c.prompt_mode == PromptMode::ClosedBook {
                "-".into()
            } else {
                c.k.to_string()
            },
            noise_source: c.noise_source.as_str().to_owned(),
            noise_ratio: ratio_label(c),
            em: a.summary.em_display(),
            f1: a.summary.f1_display(),
            rr: a.summary.rr_display(),
            n: a.summary.n.to_string(),
        }
    };

    let mut rows = Vec::new();
    for group in sorted.chunk_by(|a, b| group_key(a) == group_key(b)) {
        rows.extend(group.iter().map(|a| row(a)));
        let find = |m: PromptMode| group.iter().find(|a| a.metadata.condition.prompt_mode == m);
        if let (Some(s), Some(c)) = (find(PromptMode::Standard), find(PromptMode::Con)) {
            let base = row(c);
            rows.push(ReportRow {
                system: "delta".into(),
                em: format_delta(c.summary.em_mean, s.summary.em_mean),
                f1: format_delta(c.summary.f1_mean, s.summary.f1_mean),
                rr: format_delta(c.summary.reject_rate, s.summary.reject_rate),
                n: String::new(),
                ..base
            });
        }
    }
    Ok(rows)
}

/// Total order on finite floats for sort keys.
fn ordered(x: f64) -> i64 {
    (x * 1e6).round() as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub text: PathBuf,
}

/// Writes `report.csv` and an aligned `report.txt` into `dir`.
pub fn emit_report(artifacts: &[RunArtifacts], dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let rows = report_rows(artifacts)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    for r in &rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let text_path = dir.join("report.txt");
    std::fs::write(
        &text_path,
        render_table(&artifacts[0].metadata.condition.dataset, &rows),
    )
    .map_err(|e| Error::io(&text_path, e))?;
    Ok(ReportFiles {
        csv: csv_path,
        text: text_path,
    })
}

pub fn render_table(dataset: &str, rows: &[ReportRow]) -> String {
    let header = [
        "system", "model", "k", "source", "noise", "EM", "F1", "RR", "n",
    ];
    let cells: Vec<[&str; 9]> = rows
        .iter()
        .map(|r| {
            [
                &*r.system,
                &*r.model,
                &*r.k,
                &*r.noise_source,
                &*r.noise_ratio,
                &*r.em,
                &*r.f1,
                &*r.rr,
                &*r.n,
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for c in &cells {
        for (w, v) in widths.iter_mut().zip(c) {
            *w = (*w).max(v.chars().count());
        }
    }
    let mut out = format!("dataset: {dataset}\n");
    let line = |out: &mut String, vals: &[&str; 9]| {
        let mut l = String::new();
        for (i, (v, w)) in vals.iter().zip(&widths).enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            let pad = w - v.chars().count();
            // Text columns left-aligned, numbers right-aligned.
            if i < 5 {
                let _ = write!(l, "{v}{}", " ".repeat(pad));
            } else {
                let _ = write!(l, "{}{v}", " ".repeat(pad));
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for c in &cells {
        line(&mut out, c);
    }
    out
}

/// A deterministic stand-in reader for offline runs: it answers with the
/// first gold answer when some passage in the prompt contains one, and
/// with "unknown" otherwise. Chain-of-note prompts get a full note chain.
pub mod oracle {
    use std::collections::HashMap;

    use crate::corpus::Question;
    use crate::llm::{scripted_mock, Rule, ScriptedMock};
    use crate::metrics::contains_normalized;
    use crate::notes::render_note_chain;

    pub const REJECT: &str = "unknown";

    fn respond(golds_by_question: &HashMap<String, Vec<String>>, prompt: &str) -> String {
        let lines: Vec<&str> = prompt.lines().collect();
        let q_line = lines.iter().rposition(|l| l.starts_with("Question: "));
        let question = q_line.map_or("", |i| lines[i]["Question: ".len()..].trim());
        // Only the passage block directly above the question; teacher
        // prompts also carry exemplar passages further up.
        let mut passages: Vec<&str> = lines[..q_line.unwrap_or(0)]
            .iter()
            .rev()
            .skip_while(|l| l.trim().is_empty())
            .take_while(|l| l.starts_with("Wikipedia passage #"))
            .map(|l| l.split_once(':').map_or(*l, |(_, body)| body))
            .collect();
        passages.reverse();
        let golds = golds_by_question
            .get(question)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let hit = golds
            .iter()
            .find(|g| passages.iter().any(|p| contains_normalized(p, g)));
        let answer = hit.map_or(REJECT, |g| g.as_str());
        if !prompt.to_lowercase().contains("write reading notes") {
            return answer.to_owned();
        }
        let notes: Vec<&str> = passages
            .iter()
            .map(|p| {
                if golds.iter().any(|g| contains_normalized(p, g)) {
                    "contains the information asked for."
                } else {
                    "is not relevant to the question."
                }
            })
            .collect();
        render_note_chain(&notes, answer)
    }

    pub fn oracle(questions: &[Question]) -> ScriptedMock {
        let golds: HashMap<String, Vec<String>> = questions
            .iter()
            .map(|q| (q.text.trim().to_owned(), q.gold_answers.clone()))
            .collect();
        scripted_mock(vec![Rule::always(move |prompt| respond(&golds, prompt))])
            .expect("one rule")
            .with_id("oracle")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::NoiseSetting;
    use crate::corpus::RetrievalRun;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            text: text.into(),
            score: None,
        }
    }

    /// Six questions, each with five golden and five noisy passages.
    pub(crate) fn fixture() -> (Vec<Question>, RunMap) {
        let answers = [
            "1996",
            "Malayalam",
            "Paris",
            "Jupiter",
            "Amundsen",
            "oxygen",
        ];
        let mut questions = Vec::new();
        let mut runs = RunMap::new();
        for (i, a) in answers.iter().enumerate() {
            let id = format!("q{i}");
            questions.push(Question {
                id: id.clone(),
                text: format!("Question number {i}?"),
                gold_answers: vec![(*a).to_owned()],
            });
            let mut docs = Vec::new();
            for j in 0..10 {
                let text = if j % 2 == 1 {
                    format!("Passage {j} says the answer is {a}.")
                } else {
                    format!("Passage {j} is about something else entirely.")
                };
                docs.push(doc(&format!("{id}-d{j}"), &text));
            }
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

    fn config(mode: PromptMode, ratio: f64) -> ExperimentConfig {
        ExperimentConfig {
            condition: ExperimentCondition {
                dataset: "fixture".into(),
                k: 5,
                noise_ratio: ratio,
                noise_source: NoiseSetting::Retrieval,
                prompt_mode: mode,
                model_name: "oracle".into(),
                seed: 0,
            },
            inputs: InputPaths {
                questions: "q.jsonl".into(),
                runs: Some("r.jsonl".into()),
                corpus: None,
                subset: None,
                subset_exclusions: None,
            },
            subset: SubsetThresholds::default(),
            generation: GenerationSettings::default(),
            reject_scoring: RejectScoring::Zero,
        }
    }

    fn inputs() -> PreparedInputs {
        let (q, r) = fixture();
        PreparedInputs::new(q, r, None, None, SubsetThresholds::default()).unwrap()
    }

    #[test]
    fn oracle_con_at_zero_and_full_noise() {
        let inputs = inputs();
        let backend = oracle::oracle(&inputs.questions);
        let dir = tempfile::tempdir().unwrap();
        let clean = run_experiment(
            &config(PromptMode::Con, 0.0),
            &inputs,
            &backend,
            None,
            dir.path().join("a"),
        )
        .unwrap();
        assert_eq!(clean.summary.n, 6);
        assert_eq!(clean.summary.em_display(), "100.00");
        let noisy = run_experiment(
            &config(PromptMode::Con, 1.0),
            &inputs,
            &backend,
            None,
            dir.path().join("b"),
        )
        .unwrap();
        assert_eq!(noisy.summary.em_display(), "0.00");
        assert_eq!(noisy.summary.rr_display(), "100.00");
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let inputs = inputs();
        let backend = oracle::oracle(&inputs.questions);
        let dir = tempfile::tempdir().unwrap();
        run_experiment(
            &config(PromptMode::Standard, 0.0),
            &inputs,
            &backend,
            None,
            dir.path(),
        )
        .unwrap();
        let err = run_experiment(
            &config(PromptMode::Con, 0.0),
            &inputs,
            &backend,
            None,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConfigDigestMismatch { .. }));
        run_experiment(
            &config(PromptMode::Standard, 0.0),
            &inputs,
            &backend,
            None,
            dir.path(),
        )
        .unwrap();
    }

    #[test]
    fn summary_recomputes_from_items() {
        let inputs = inputs();
        let backend = oracle::oracle(&inputs.questions);
        let dir = tempfile::tempdir().unwrap();
        let art = run_experiment(
            &config(PromptMode::Standard, 0.4),
            &inputs,
            &backend,
            None,
            dir.path(),
        )
        .unwrap();
        let loaded = RunArtifacts::load(dir.path()).unwrap();
        assert_eq!(loaded.summary, art.summary);
        let items = loaded.scored_items().unwrap();
        assert_eq!(
            aggregate(&items, &art.metadata.condition_id).unwrap(),
            art.summary
        );
    }

    #[test]
    fn grid_shape_and_failures() {
        let inputs = inputs();
        let backend = oracle::oracle(&inputs.questions);
        let dir = tempfile::tempdir().unwrap();
        let ratios = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let cells = run_grid(
            &config(PromptMode::Con, 0.0),
            &ratios,
            &[PromptMode::Standard, PromptMode::Con],
            &inputs,
            &backend,
            None,
            dir.path(),
        )
        .unwrap();
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().all(|c| c.result.is_ok()));
        assert!(run_grid(
            &config(PromptMode::Con, 0.0),
            &[1.5],
            &[PromptMode::Con],
            &inputs,
            &backend,
            None,
            dir.path()
        )
        .is_err());
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(41.83, 34.28), "(+7.55)");
        assert_eq!(format_delta(10.0, 12.5), "(-2.50)");
        assert_eq!(format_delta(3.0, 3.0), "(+0.00)");
    }

    fn artifact(dataset: &str, mode: PromptMode, ratio: f64, em: f64) -> RunArtifacts {
        let mut cfg = config(mode, ratio);
        cfg.condition.dataset = dataset.into();
        let id = cfg.condition.id();
        RunArtifacts {
            dir: PathBuf::new(),
            scored_items_path: PathBuf::new(),
            exclusions_path: PathBuf::new(),
            summary: MetricsSummary {
                condition: id.clone(),
                n: 10,
                em_mean: em,
                f1_mean: em,
                reject_rate: 0.0,
                n_unparseable: 0,
                n_generation_errors: 0,
            },
            metadata: RunMetadata {
                condition_id: id,
                condition: cfg.condition,
                config_digest: String::new(),
                template_versions: BTreeMap::new(),
                reject_lexicon_version: "1".into(),
                k: 5,
                subset_thresholds: SubsetThresholds::default(),
                reject_scoring: RejectScoring::Zero,
                backend_id: "x".into(),
                started_at_unix: 0,
                finished_at_unix: Some(0),
                n_scored: 10,
                n_excluded: 0,
                n_hard_errors: 0,
            },
        }
    }

    #[test]
    fn report_rows_and_errors() {
        let arts = vec![
            artifact("nq", PromptMode::Con, 0.0, 50.0),
            artifact("nq", PromptMode::Standard, 1.0, 34.28),
            artifact("nq", PromptMode::Con, 1.0, 41.83),
        ];
        let rows = report_rows(&arts).unwrap();
        let systems: Vec<_> = rows
            .iter()
            .map(|r| (r.system.as_str(), r.noise_ratio.as_str()))
            .collect();
        assert_eq!(
            systems,
            [
                ("standard", "100%"),
                ("con", "100%"),
                ("delta", "100%"),
                ("con", "0%")
            ]
        );
        assert_eq!(rows[2].em, "(+7.55)");
        assert!(report_rows(&[]).is_err());
        let mixed = vec![
            artifact("nq", PromptMode::Con, 0.0, 1.0),
            artifact("tqa", PromptMode::Con, 0.0, 1.0),
        ];
        assert!(report_rows(&mixed).is_err());

        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&arts, dir.path()).unwrap();
        let csv = std::fs::read_to_string(files.csv).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let txt = std::fs::read_to_string(files.text).unwrap();
        assert!(txt.contains("(+7.55)"));
    }
}
