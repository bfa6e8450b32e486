use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conote::condition::{NoiseSetting, PromptMode};
use conote::corpus::{load_document_store, load_questions, load_retrieval_runs, Question};
use conote::llm::{Backend, HttpBackend, HttpConfig, ResponseCache};
use conote::noisemix::{build_condition_batch, MixtureSpec};
use conote::notes::{
    collect_training_notes, load_note_records, write_review_sample, CollectionConfig,
    NoteCheckpoint,
};
use conote::prompt::PromptTemplate;
use conote::relevance::{
    build_robustness_subset, label_runs, recall_counts, Depth, RobustnessSubset,
};
use conote::runner::{
    self, emit_report, run_experiment, run_grid, ExperimentConfig, PreparedInputs, RunArtifacts,
};
use conote::traindata::{emit_records, serialize_records, LossMode};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "conote",
    version,
    about = "Chain-of-note retrieval QA evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer-containment recall of retrieval runs.
    Recall {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        /// Integer depth or "all".
        #[arg(long, default_value = "all")]
        depth: Depth,
    },
    /// Build the robustness subset of questions with enough golden and noisy documents.
    Subset {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_golden: usize,
        #[arg(long, default_value_t = 0)]
        min_noisy: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        exclusions_out: PathBuf,
    },
    /// Write the document mixtures of one noise condition.
    Mix {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value = "retrieval")]
        source: NoiseSetting,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment condition from a config file.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        mode: Option<PromptMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a noise-ratio by prompt-mode grid.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "standard,con")]
        modes: Vec<PromptMode>,
        /// Also write report.csv and report.txt into the output directory.
        #[arg(long)]
        report: bool,
    },
    /// Ask a teacher model for reading notes on sampled questions.
    CollectNotes {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        sample_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        model: String,
        /// Checkpoint directory; re-running resumes.
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the first N records to review_sample.jsonl.
        #[arg(long)]
        review_sample: Option<usize>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Turn collected notes into weighted-loss training records.
    EmitTrain {
        #[arg(long)]
        notes: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate finished runs.
    Report {
        /// Run directories, or directories containing run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Response cache file; defaults to cache.jsonl in the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Http)]
    backend: BackendKind,
    /// Chat-completions URL; overrides the environment.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    /// Offline reader that answers from gold answers found in the passages.
    Oracle,
}

fn make_backend(args: &BackendArgs, questions: &[Question]) -> Result<Box<dyn Backend>> {
    Ok(match args.backend {
        BackendKind::Http => Box::new(HttpBackend::new(HttpConfig::from_env(
            args.endpoint.as_deref(),
        )?)?),
        BackendKind::Oracle => Box::new(runner::oracle::oracle(questions)),
    })
}

fn open_cache(run: &RunArgs) -> Result<Option<ResponseCache>> {
    if run.no_cache {
        return Ok(None);
    }
    let path = run
        .cache
        .clone()
        .unwrap_or_else(|| run.out.join("cache.jsonl"));
    Ok(Some(ResponseCache::open(&path)?))
}

fn load_run_config(run: &RunArgs) -> Result<(ExperimentConfig, PreparedInputs)> {
    let config = ExperimentConfig::load(&run.config)?;
    let base = run.config.parent().unwrap_or(Path::new(""));
    let mut paths = config.inputs.clone();
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut paths.questions);
    for p in [
        &mut paths.runs,
        &mut paths.corpus,
        &mut paths.subset,
        &mut paths.subset_exclusions,
    ]
    .into_iter()
    .flatten()
    {
        resolve(p);
    }
    let inputs = PreparedInputs::load(&paths, config.subset).context("loading inputs")?;
    Ok((config, inputs))
}

fn print_summary(a: &RunArtifacts) {
    println!(
        "{}\tEM {}\tF1 {}\tRR {}\tn {}\texcluded {}",
        a.metadata.condition_id,
        a.summary.em_display(),
        a.summary.f1_display(),
        a.summary.rr_display(),
        a.summary.n,
        a.metadata.n_excluded
    );
}

fn collect_run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for root in roots {
        if root.join(runner::METADATA_FILE).exists() {
            dirs.push(root.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(root)
            .with_context(|| format!("reading {}", root.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(runner::METADATA_FILE).exists())
            .collect();
        children.sort();
        dirs.extend(children);
    }
    Ok(dirs)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Recall {
            questions,
            runs,
            depth,
        } => {
            let questions = load_questions(questions)?;
            let runs = load_retrieval_runs(runs)?;
            let c = recall_counts(&runs, &questions, depth)?;
            println!("recall {:.2} ({}/{})", 100.0 * c.value(), c.hits, c.total);
        }
        Command::Subset {
            questions,
            runs,
            min_golden,
            min_noisy,
            out,
            exclusions_out,
        } => {
            let questions = load_questions(questions)?;
            let runs = load_retrieval_runs(runs)?;
            let subset = build_robustness_subset(&runs, &questions, min_golden, min_noisy)?;
            subset.write(&out, &exclusions_out)?;
            println!("subset {} of {}", subset.subset_size, subset.full_size);
        }
        Command::Mix {
            questions,
            runs,
            corpus,
            subset,
            k,
            ratio,
            source,
            seed,
            out,
        } => {
            let Some(source) = source.mixture_source() else {
                bail!("mix needs a noise source of retrieval or random");
            };
            let questions = load_questions(questions)?;
            let runs = load_retrieval_runs(runs)?;
            let store = corpus.map(load_document_store).transpose()?;
            let subset = match subset {
                Some(p) => RobustnessSubset::read(&p, None)?,
                None => build_robustness_subset(&runs, &questions, 1, 0)?,
            };
            let labeled = label_runs(&runs, &questions)?;
            let spec = MixtureSpec::new(k, ratio, source, seed)?;
            let batch = build_condition_batch(&subset, &labeled, &spec, store.as_ref())?;
            let label = format!("k{k}/r{ratio:.2}/{}/s{seed}", source_name(source));
            batch.write_records(&out, &label)?;
            for e in &batch.excluded {
                eprintln!("excluded {}: {}", e.question_id, e.reason);
            }
            println!(
                "{} mixtures, {} excluded",
                batch.mixtures.len(),
                batch.excluded.len()
            );
        }
        Command::Eval {
            run,
            k,
            ratio,
            mode,
            seed,
        } => {
            let (mut config, inputs) = load_run_config(&run)?;
            let c = &mut config.condition;
            c.k = k.unwrap_or(c.k);
            c.noise_ratio = ratio.unwrap_or(c.noise_ratio);
            c.prompt_mode = mode.unwrap_or(c.prompt_mode);
            c.seed = seed.unwrap_or(c.seed);
            let backend = make_backend(&run.backend, &inputs.questions)?;
            let cache = open_cache(&run)?;
            let art = run_experiment(&config, &inputs, &backend, cache.as_ref(), &run.out)?;
            print_summary(&art);
            return Ok(art.metadata.n_hard_errors == 0);
        }
        Command::Grid {
            run,
            ratios,
            modes,
            report,
        } => {
            let (config, inputs) = load_run_config(&run)?;
            let backend = make_backend(&run.backend, &inputs.questions)?;
            let cache = open_cache(&run)?;
            let cells = run_grid(
                &config,
                &ratios,
                &modes,
                &inputs,
                &backend,
                cache.as_ref(),
                &run.out,
            )?;
            let mut ok = true;
            let mut finished = Vec::new();
            for cell in cells {
                match cell.result {
                    Ok(a) => {
                        print_summary(&a);
                        ok &= a.metadata.n_hard_errors == 0;
                        finished.push(a);
                    }
                    Err(e) => {
                        eprintln!("{}\tFAILED: {e}", cell.condition);
                        ok = false;
                    }
                }
            }
            if report && !finished.is_empty() {
                let files = emit_report(&finished, &run.out)?;
                print!("{}", std::fs::read_to_string(&files.text)?);
            }
            return Ok(ok);
        }
        Command::CollectNotes {
            questions,
            runs,
            sample_size,
            seed,
            k,
            model,
            out_dir,
            review_sample,
            max_in_flight,
            backend,
        } => {
            let questions = load_questions(questions)?;
            let runs = load_retrieval_runs(runs)?;
            let backend = make_backend(&backend, &questions)?;
            let mut config = CollectionConfig::new(sample_size, seed, model);
            config.k = k;
            config.max_in_flight = max_in_flight;
            let checkpoint = NoteCheckpoint::in_dir(&out_dir);
            let out = collect_training_notes(
                &questions,
                &runs,
                &backend,
                &PromptTemplate::note_collection(),
                &config,
                Some(&checkpoint),
            )?;
            if let Some(n) = review_sample {
                write_review_sample(&out.records, n, &out_dir.join("review_sample.jsonl"))?;
            }
            println!("{} notes, {} skipped", out.records.len(), out.skips.len());
        }
        Command::EmitTrain { notes, seed, out } => {
            let notes = load_note_records(notes)?;
            let records = emit_records(&notes, &PromptTemplate::con(), seed)?;
            serialize_records(&records, &out)?;
            let full = records
                .iter()
                .filter(|r| r.loss_mode == LossMode::FullSequence)
                .count();
            println!(
                "{} records, {} full_sequence, {} answer_only",
                records.len(),
                full,
                records.len() - full
            );
        }
        Command::Report { runs, out } => {
            let dirs = collect_run_dirs(&runs)?;
            let artifacts = dirs
                .iter()
                .map(RunArtifacts::load)
                .collect::<conote::Result<Vec<_>>>()?;
            let files = emit_report(&artifacts, &out)?;
            print!("{}", std::fs::read_to_string(&files.text)?);
        }
    }
    Ok(true)
}

fn source_name(s: conote::noisemix::NoiseSource) -> &'static str {
    match s {
        conote::noisemix::NoiseSource::Retrieval => "retrieval",
        conote::noisemix::NoiseSource::Random => "random",
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
