//! `mobal`: headless driver for every pipeline stage.
//!
//! Exit status is 0 on success, 1 when input fails validation (including
//! imports with rejected records) and 2 on usage errors. Settings resolve
//! in the order flag, environment variable, `--config` file, default.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use mobal_core::active_learning::{
    select_batch, select_random, EmbeddingVectors, SelectionStrategy, TfIdf, Vectorizer,
};
use mobal_core::annotation::{EntityType, Phase, SentenceAnnotation};
use mobal_core::corpus::{
    deduplicate_sentences, ingest_dir, ingest_documents, ingest_manifest, segment_documents, Document, IngestReport,
    Sentence, SentencePool,
};
use mobal_core::evaluation::{
    cross_validate, evaluate_model, iaa_report, EntityCounts, DEFAULT_FOLDS, DEFAULT_FOLD_SEED,
};
use mobal_core::jsonl::{read_jsonl, write_jsonl};
use mobal_core::project::{init_project, ExportFormat, ImportReport, Project, ProjectConfig};
use mobal_core::retrieval::{
    expand_keywords_iteration, query_any_keyword, rank_candidate_keywords, InvertedIndex, KeywordSet, Stopwords,
    DEFAULT_MAX_EXPANSIONS,
};
use mobal_core::synthetic::{generate_corpus, SyntheticConfig};
use mobal_core::taggers::{train_on_annotations, TaggerKind, TaggerModel, TrainConfig};
use mobal_core::workflow::{ApiSession, Role};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Which subcommand covers each HTTP route.
pub const SERVICE_PARITY: [(&str, &str); 7] = [
    ("GET /api/batch/next", "pretag-export"),
    ("POST /api/annotations/blind", "import-annotations"),
    ("POST /api/annotations/gold", "import-annotations"),
    ("POST /api/iteration/run", "iterate"),
    ("GET /api/jobs/{token}", "iterate"),
    ("GET /api/metrics", "evaluate"),
    ("GET /api/sentence/{id}", "export"),
];

#[derive(Debug, Parser)]
#[command(name = "mobal", version, about = "Active-learning annotation pipeline for mobility NER")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Print reports as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Project settings file (JSON) consulted after flags and environment.
    #[arg(long, global = true, env = "MOBAL_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ProjectArg {
    /// Project directory.
    #[arg(long, env = "MOBAL_PROJECT", value_name = "DIR")]
    pub project: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read raw notes (files, directories or a CSV manifest) into a document list.
    Ingest {
        /// Input files or directories.
        #[arg(long = "in", value_name = "PATH", num_args = 1.., required_unless_present = "manifest")]
        inputs: Vec<PathBuf>,
        /// CSV manifest of `path,source_tag` rows.
        #[arg(long, conflicts_with = "inputs")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "notes")]
        source_tag: String,
        /// Output documents (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Split documents into tokenized sentences.
    Segment {
        #[arg(long = "in", value_name = "DOCS")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge sentences with identical normalized text into the pool.
    Dedupe {
        #[arg(long = "in", value_name = "SENTENCES", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and write the inverted index of a pool.
    Index {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidate keywords over the sentences the current set retrieves.
    KeywordsReport {
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Stopword file, one term per line (default: bundled English list).
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        top: usize,
    },
    /// Add accepted terms and their inflections to the keyword set.
    KeywordsAccept {
        #[arg(long)]
        keywords: PathBuf,
        /// Terms to add (repeat or comma-separate).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        accept: Vec<String>,
        /// Create a new set from the accepted terms.
        #[arg(long)]
        seed: bool,
        #[arg(long, required_unless_present = "seed")]
        pool: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// Accept terms that are not in the current report.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_EXPANSIONS)]
        max_expansions: u32,
        /// Where to write the new set (default: overwrite --keywords).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the pool sentences that match any keyword.
    Retrieve {
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Create a project from a candidate pool.
    Init {
        #[command(flatten)]
        project: ProjectArg,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// Precomputed sentence vectors (JSONL) instead of TF-IDF.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        learner: LearnerFlags,
    },
    /// Open the seed batch from a list of ids and/or seed gold annotations.
    SeedImport {
        #[command(flatten)]
        project: ProjectArg,
        /// Sentence ids, one per line.
        #[arg(long, required_unless_present = "gold")]
        ids: Option<PathBuf>,
        /// Gold annotations for the seed sentences (JSONL), accepted without blind passes.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Score the unlabeled pool with the current committee and write the ranking.
    Select {
        #[command(flatten)]
        project: ProjectArg,
        /// Sentences to select (default: project setting).
        #[arg(long, env = "MOBAL_K")]
        k: Option<usize>,
        /// Density exponent (default: project setting).
        #[arg(long, env = "MOBAL_BETA")]
        beta: Option<f64>,
        #[arg(long, default_value = "selection.json")]
        out: PathBuf,
    },
    /// Write the open batch's pre-tags, or the full batch payload for one user.
    PretagExport {
        #[command(flatten)]
        project: ProjectArg,
        #[arg(long)]
        out: PathBuf,
        /// Write the batch payload served to this user instead.
        #[arg(long)]
        annotator: Option<String>,
        #[arg(long, default_value = "annotator")]
        role: Role,
    },
    /// Import blind or gold annotations from a standoff JSONL file.
    ImportAnnotations {
        #[command(flatten)]
        project: ProjectArg,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        phase: Phase,
        /// Accept gold without the required blind passes.
        #[arg(long)]
        allow_without_blind: bool,
    },
    /// Close the open batch, retrain, and open the next batch.
    Iterate {
        #[command(flatten)]
        project: ProjectArg,
    },
    /// Train one tagger on annotated sentences.
    Train {
        #[arg(long)]
        pool: PathBuf,
        /// Training annotations (JSONL).
        #[arg(long)]
        gold: PathBuf,
        /// Validation annotations for early stopping.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, default_value = "crf")]
        kind: TaggerKind,
        #[arg(long, default_value = "Action")]
        etype: EntityType,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a model, cross-validate a tagger, or report a project's F1 trace.
    Evaluate {
        /// Report the F1 trace and entity counts of a project.
        #[arg(long, env = "MOBAL_PROJECT", conflicts_with_all = ["model", "pool", "gold"])]
        project: Option<PathBuf>,
        #[arg(long, requires_all = ["pool", "gold"])]
        model: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        pool: Option<PathBuf>,
        #[arg(long, requires = "pool")]
        gold: Option<PathBuf>,
        #[arg(long, default_value = "crf")]
        kind: TaggerKind,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = DEFAULT_FOLD_SEED)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        etypes: Vec<EntityType>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Agreement between two blind annotation sets and gold.
    Iaa {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_delimiter = ',')]
        etypes: Vec<EntityType>,
    },
    /// Export the gold set, or show one sentence with all its annotations.
    Export {
        #[command(flatten)]
        project: ProjectArg,
        #[arg(long, required_unless_present = "sentence")]
        out: Option<PathBuf>,
        #[arg(long, default_value = "standoff")]
        format: ExportFormat,
        /// Split into this many stratified folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FOLD_SEED)]
        seed: u64,
        /// Print one sentence's record instead of exporting.
        #[arg(long, conflicts_with_all = ["out", "folds"])]
        sentence: Option<String>,
    },
    /// Serve the annotation API for a project.
    Serve {
        #[command(flatten)]
        project: ProjectArg,
        #[arg(long, env = "MOBAL_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "MOBAL_HOST", default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Generate the synthetic evaluation corpus with gold annotations.
    SynthCorpus {
        #[arg(long)]
        sentences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mobility_rate: Option<f64>,
        #[arg(long)]
        zipf_s: Option<f64>,
        #[arg(long)]
        out_pool: PathBuf,
        #[arg(long)]
        out_gold: PathBuf,
    },
}

/// Learner settings that `init` writes into the project config.
#[derive(Debug, Args)]
pub struct LearnerFlags {
    /// Sentences per batch.
    #[arg(long, env = "MOBAL_K")]
    pub k: Option<usize>,
    /// Density exponent.
    #[arg(long, env = "MOBAL_BETA")]
    pub beta: Option<f64>,
    #[arg(long, env = "MOBAL_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// `density-qbc` or `random`.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<SelectionStrategy>,
    /// Types that get pre-tagging models.
    #[arg(long, value_delimiter = ',')]
    pub etypes: Vec<EntityType>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub min_blind: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<SelectionStrategy, String> {
    match s {
        "density-qbc" | "density_qbc" | "qbc" => Ok(SelectionStrategy::DensityQbc),
        "random" => Ok(SelectionStrategy::Random),
        _ => Err(format!("unknown strategy {s:?} (expected density-qbc or random)")),
    }
}

impl LearnerFlags {
    fn apply(&self, cfg: &mut ProjectConfig) {
        let l = &mut cfg.learner;
        if let Some(k) = self.k {
            l.k = k;
        }
        if let Some(b) = self.beta {
            l.beta = b;
        }
        if let Some(s) = self.seed {
            l.seed = s;
            l.train.seed = s;
        }
        if self.max_iterations.is_some() {
            l.max_iterations = self.max_iterations;
        }
        if let Some(s) = self.strategy {
            l.strategy = s;
        }
        if !self.etypes.is_empty() {
            l.etypes = self.etypes.clone();
        }
        if let Some(e) = self.epochs {
            l.train.epochs = e;
        }
        if let Some(m) = self.min_blind {
            cfg.min_blind_annotators = m;
        }
    }
}

/// Names of all subcommands, in declaration order.
pub fn subcommands() -> Vec<String> {
    Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect()
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::Invalid) => EXIT_INVALID,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Ok,
    /// Completed, but some input was rejected.
    Invalid,
}

struct Out {
    json: bool,
}

impl Out {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            let t = text();
            print!("{t}");
            if !t.ends_with('\n') {
                println!();
            }
        }
        Ok(())
    }
}

fn stopwords(path: Option<&Path>) -> Result<Stopwords> {
    Ok(match path {
        Some(p) => Stopwords::from_file(p)?,
        None => Stopwords::english(),
    })
}

fn load_config(path: Option<&Path>) -> Result<Option<ProjectConfig>> {
    path.map(|p| ProjectConfig::load(p).with_context(|| format!("reading config {}", p.display()))).transpose()
}

fn annotations_of(path: &Path) -> Result<Vec<SentenceAnnotation>> {
    Ok(read_jsonl(path)?)
}

fn pairs<'a>(
    pool: &'a SentencePool,
    anns: &'a [SentenceAnnotation],
) -> Result<Vec<(&'a Sentence, &'a SentenceAnnotation)>> {
    anns.iter()
        .map(|a| {
            pool.get(&a.sentence_id)
                .map(|s| (s, a))
                .ok_or_else(|| anyhow!("annotation refers to sentence {} which is not in the pool", a.sentence_id))
        })
        .collect()
}

fn import_outcome(report: &ImportReport) -> Outcome {
    if report.rejected.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Invalid
    }
}

fn import_text(report: &ImportReport) -> String {
    let mut t = format!(
        "imported {}, rejected {}, with warnings {}\n",
        report.imported,
        report.rejected.len(),
        report.warnings.len()
    );
    for r in &report.rejected {
        t.push_str(&format!("  rejected {}: {}\n", r.sentence_id, r.reason));
    }
    t
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let out = Out { json: cli.json };
    match &cli.command {
        Command::Ingest { inputs, manifest, source_tag, out: dest } => {
            let report = match manifest {
                Some(m) => ingest_manifest(m)?,
                None => ingest_inputs(inputs, source_tag)?,
            };
            write_jsonl(dest, &report.documents)?;
            let errors: Vec<_> = report.errors.iter().map(|(p, e)| json!({"path": p, "error": e})).collect();
            out.emit(&json!({"documents": report.documents.len(), "skipped": errors}), || {
                let mut t = format!("{} documents -> {}\n", report.documents.len(), dest.display());
                for (p, e) in &report.errors {
                    t.push_str(&format!("  skipped {}: {e}\n", p.display()));
                }
                t
            })?;
        }
        Command::Segment { input, out: dest } => {
            let docs: Vec<Document> = read_jsonl(input)?;
            let sentences = segment_documents(&docs);
            write_jsonl(dest, &sentences)?;
            out.emit(&json!({"documents": docs.len(), "sentences": sentences.len()}), || {
                format!("{} documents, {} sentences -> {}", docs.len(), sentences.len(), dest.display())
            })?;
        }
        Command::Dedupe { inputs, out: dest } => {
            let mut all: Vec<Sentence> = Vec::new();
            for p in inputs {
                all.extend(read_jsonl::<Sentence>(p)?);
            }
            let n = all.len();
            let pool = deduplicate_sentences(all);
            pool.save(dest)?;
            out.emit(&json!({"input": n, "pool": pool.len()}), || {
                format!("{n} sentences, {} unique -> {}", pool.len(), dest.display())
            })?;
        }
        Command::Index { pool, out: dest } => {
            let pool = SentencePool::load(pool)?;
            let index = InvertedIndex::build(&pool)?;
            index.save(dest)?;
            out.emit(&json!({"sentences": index.pool_size(), "vocabulary": index.vocabulary_size()}), || {
                format!("{} sentences, {} terms -> {}", index.pool_size(), index.vocabulary_size(), dest.display())
            })?;
        }
        Command::KeywordsReport { keywords, pool, stopwords: sw, top } => {
            let ks = KeywordSet::load(keywords)?;
            let pool = SentencePool::load(pool)?;
            let index = InvertedIndex::build(&pool)?;
            let hits = query_any_keyword(&index, &ks)?;
            let report = rank_candidate_keywords(&hits, &pool, &ks, &stopwords(sw.as_deref())?)?;
            let terms = report.top(*top);
            out.emit(
                &json!({"version": ks.version, "keywords": ks.len(), "retrieved": hits.len(), "terms": terms}),
                || {
                    let mut t = format!(
                        "keyword set v{} ({} terms) retrieves {} sentences\n",
                        ks.version,
                        ks.len(),
                        hits.len()
                    );
                    for c in terms {
                        t.push_str(&format!("{:>8}  {}\n", c.frequency, c.term));
                    }
                    t
                },
            )?;
        }
        Command::KeywordsAccept { keywords, accept, seed, pool, stopwords: sw, force, max_expansions, out: dest } => {
            let (before, next) = if *seed {
                (BTreeSet::new(), KeywordSet::from_seed(accept)?)
            } else {
                let ks = KeywordSet::load(keywords)?;
                if ks.version >= *max_expansions && !force {
                    bail!("keyword set is at version {} and the expansion cap is {max_expansions}", ks.version);
                }
                let pool = SentencePool::load(pool.as_ref().expect("required unless --seed"))?;
                let index = InvertedIndex::build(&pool)?;
                let next = expand_keywords_iteration(&index, &pool, &ks, &stopwords(sw.as_deref())?, accept, *force)?;
                (ks.keywords, next)
            };
            let dest = dest.as_ref().unwrap_or(keywords);
            next.save(dest)?;
            let added: Vec<&String> = next.keywords.difference(&before).collect();
            out.emit(&json!({"version": next.version, "keywords": next.len(), "added": added}), || {
                format!(
                    "keyword set v{}: {} terms, {} added -> {}",
                    next.version,
                    next.len(),
                    added.len(),
                    dest.display()
                )
            })?;
        }
        Command::Retrieve { keywords, pool, out: dest } => {
            let ks = KeywordSet::load(keywords)?;
            let pool = SentencePool::load(pool)?;
            let index = InvertedIndex::build(&pool)?;
            let hits = query_any_keyword(&index, &ks)?;
            let candidates = pool.subset(hits.iter().map(String::as_str));
            candidates.save(dest)?;
            out.emit(&json!({"pool": pool.len(), "retrieved": candidates.len()}), || {
                format!("{} of {} sentences match -> {}", candidates.len(), pool.len(), dest.display())
            })?;
        }
        Command::Init { project, pool, keywords, embeddings, learner } => {
            let mut cfg = load_config(cli.config.as_deref())?.unwrap_or_default();
            learner.apply(&mut cfg);
            let pool = SentencePool::load(pool)?;
            let vectorizer: Box<dyn Vectorizer> = match embeddings {
                Some(p) => Box::new(EmbeddingVectors::load(p)?),
                None => Box::new(TfIdf),
            };
            let mut p = init_project(&project.project, &cfg)?;
            p.set_pool(pool, vectorizer.as_ref())?;
            if let Some(k) = keywords {
                p.set_keywords(KeywordSet::load(k)?)?;
            }
            out.emit(&json!({"project": project.project, "sentences": p.pool().len(), "config": cfg}), || {
                format!("initialized {} with {} sentences", project.project.display(), p.pool().len())
            })?;
        }
        Command::SeedImport { project, ids, gold } => {
            let mut p = Project::open(&project.project)?;
            let seed_gold = gold.as_deref().map(annotations_of).transpose()?;
            let ids: Vec<String> = match (ids, &seed_gold) {
                (Some(path), _) => fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                (None, Some(g)) => g.iter().map(|a| a.sentence_id.clone()).collect(),
                (None, None) => unreachable!("clap requires --ids or --gold"),
            };
            let batch = p.open_seed(ids)?;
            let report = match seed_gold {
                Some(g) => p.import_annotations(g, Phase::Gold, true)?,
                None => ImportReport::default(),
            };
            out.emit(&json!({"seed": batch.len(), "import": report}), || {
                format!("seed batch of {} sentences opened; {}", batch.len(), import_text(&report))
            })?;
            return Ok(import_outcome(&report));
        }
        Command::Select { project, k, beta, out: dest } => {
            let p = Project::open_read_only(&project.project)?;
            let cfg = load_config(cli.config.as_deref())?.unwrap_or_else(|| p.config().clone());
            let k = k.unwrap_or(cfg.learner.k);
            let beta = beta.unwrap_or(cfg.learner.beta);
            let learner = p.learner().ok_or_else(|| anyhow!("project has no pool"))?;
            let unlabeled = learner.unlabeled();
            let iteration = p.iteration() + 1;
            let selection = match cfg.learner.strategy {
                SelectionStrategy::Random => select_random(&unlabeled, k, iteration, cfg.learner.seed),
                SelectionStrategy::DensityQbc => {
                    let committee = learner.committee().ok_or_else(|| {
                        anyhow!("no committee has been trained yet; close the seed batch with `iterate`")
                    })?;
                    select_batch(&unlabeled, committee, learner.density(), k, beta, iteration)?
                }
            };
            selection.save(dest)?;
            out.emit(
                &json!({"iteration": iteration, "k": k, "beta": beta, "chosen": selection.chosen, "out": dest}),
                || {
                    format!(
                        "selected {} of {} sentences (k={k}, beta={beta}) -> {}",
                        selection.chosen.len(),
                        unlabeled.len(),
                        dest.display()
                    )
                },
            )?;
        }
        Command::PretagExport { project, out: dest, annotator, role } => {
            let p = Project::open_read_only(&project.project)?;
            let batch = p.open_batch().ok_or_else(|| anyhow!("no open batch"))?;
            match annotator {
                Some(who) => {
                    let payload = p.next_batch(&ApiSession::new(who.as_str(), *role)?)?;
                    fs::write(dest, serde_json::to_string_pretty(&payload)? + "\n")
                        .with_context(|| format!("writing {}", dest.display()))?;
                }
                None => {
                    let latest = p.latest(Phase::Pretag);
                    let pretags: Vec<&SentenceAnnotation> =
                        batch.sentence_ids.iter().filter_map(|id| latest.get(id.as_str()).copied()).collect();
                    write_jsonl(dest, &pretags)?;
                }
            }
            out.emit(&json!({"iteration": batch.iteration, "sentences": batch.len(), "out": dest}), || {
                format!("batch {} ({} sentences) -> {}", batch.iteration, batch.len(), dest.display())
            })?;
        }
        Command::ImportAnnotations { project, input, phase, allow_without_blind } => {
            if *phase == Phase::Pretag {
                bail!("pre-tags are generated by the project and cannot be imported");
            }
            let mut p = Project::open(&project.project)?;
            let report = p.import_annotation_file(input, *phase, *allow_without_blind)?;
            out.emit(&report, || import_text(&report))?;
            return Ok(import_outcome(&report));
        }
        Command::Iterate { project } => {
            let mut p = Project::open(&project.project)?;
            let record = p.close_and_run()?;
            let status = if record.terminal { "terminal" } else { "ready" };
            out.emit(&json!({"status": status, "record": record}), || {
                let mut t = format!(
                    "iteration {} closed: {} labeled, {} selected ({status})\n",
                    record.iteration,
                    record.labeled.len(),
                    record.selected.len()
                );
                for (etype, f1) in &record.validation_f1 {
                    t.push_str(&format!("  {etype} validation F1 {f1:.4}\n"));
                }
                t
            })?;
        }
        Command::Train { pool, gold, valid, kind, etype, out: dest, epochs, l2, seed } => {
            let pool = SentencePool::load(pool)?;
            let train_anns = annotations_of(gold)?;
            let valid_anns = valid.as_deref().map(annotations_of).transpose()?.unwrap_or_default();
            let train = pairs(&pool, &train_anns)?;
            let val = pairs(&pool, &valid_anns)?;
            let mut cfg =
                load_config(cli.config.as_deref())?.map(|c| c.learner.train).unwrap_or_else(TrainConfig::default);
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(l) = l2 {
                cfg.l2 = *l;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let model = train_on_annotations(*kind, *etype, &train, &val, &cfg)?;
            model.save(dest)?;
            let score = (!val.is_empty()).then(|| evaluate_model(&model, &val));
            out.emit(
                &json!({"kind": kind, "etype": etype, "train": train.len(), "valid": val.len(), "validation": score}),
                || {
                    let mut t = format!("{kind} {etype} tagger on {} sentences -> {}", train.len(), dest.display());
                    if let Some(s) = &score {
                        t.push_str(&format!("\n  validation P {:.4} R {:.4} F1 {:.4}", s.precision, s.recall, s.f1));
                    }
                    t
                },
            )?;
        }
        Command::Evaluate { project, model, pool, gold, kind, folds, seed, etypes, epochs } => {
            if let Some(dir) = project {
                let p = Project::open_read_only(dir)?;
                let m = p.metrics();
                out.emit(&m, || {
                    let mut t = String::from("iteration,labeled");
                    let types: Vec<EntityType> =
                        m.trace.first().map(|tp| tp.validation_f1.keys().copied().collect()).unwrap_or_default();
                    for e in &types {
                        t.push_str(&format!(",{}", e.short()));
                    }
                    t.push('\n');
                    for tp in &m.trace {
                        t.push_str(&format!("{},{}", tp.iteration, tp.labeled));
                        for e in &types {
                            t.push_str(&format!(",{:.4}", tp.validation_f1.get(e).copied().unwrap_or(0.0)));
                        }
                        t.push('\n');
                    }
                    t.push('\n');
                    t.push_str(&m.counts_table);
                    t
                })?;
                return Ok(Outcome::Ok);
            }
            let (Some(pool), Some(gold)) = (pool, gold) else {
                bail!("evaluate needs --project, or --pool with --gold");
            };
            let pool = SentencePool::load(pool)?;
            let anns = annotations_of(gold)?;
            let data = pairs(&pool, &anns)?;
            if let Some(mp) = model {
                let m = TaggerModel::load(mp)?;
                let s = evaluate_model(&m, &data);
                out.emit(&json!({"kind": m.kind, "etype": m.etype, "score": s}), || {
                    format!("{} {} exact: P {:.4} R {:.4} F1 {:.4}", m.kind, m.etype, s.precision, s.recall, s.f1)
                })?;
            } else {
                let mut cfg =
                    load_config(cli.config.as_deref())?.map(|c| c.learner.train).unwrap_or_else(TrainConfig::default);
                if let Some(e) = epochs {
                    cfg.epochs = *e;
                }
                let types = if etypes.is_empty() { EntityType::IN_SCOPE.to_vec() } else { etypes.clone() };
                let cv = cross_validate(&data, *kind, *folds, *seed, &cfg, &types)?;
                out.emit(&cv, || cv.to_csv())?;
            }
        }
        Command::Iaa { a, b, gold, etypes } => {
            let types = if etypes.is_empty() { EntityType::IN_SCOPE.to_vec() } else { etypes.clone() };
            let report = iaa_report(&annotations_of(a)?, &annotations_of(b)?, &annotations_of(gold)?, &types)?;
            out.emit(&report, || report.to_csv())?;
        }
        Command::Export { project, out: dest, format, folds, seed, sentence } => {
            let p = Project::open_read_only(&project.project)?;
            if let Some(id) = sentence {
                let view = p.sentence_view(id)?;
                // a single record is always printed as JSON
                println!("{}", serde_json::to_string_pretty(&view)?);
                return Ok(Outcome::Ok);
            }
            let dest = dest.as_ref().expect("required unless --sentence");
            let report = p.export_dataset(dest, *format, folds.map(|k| (k, *seed)))?;
            out.emit(&report, || {
                let mut t = String::new();
                for f in &report.files {
                    t.push_str(&format!("wrote {}\n", f.display()));
                }
                t.push_str(&report.counts.to_table("gold"));
                t
            })?;
        }
        Command::Serve { project, port, host } => {
            let p = Project::open(&project.project)?;
            let addr = SocketAddr::new(*host, *port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(mobal_service::serve(p, addr)).with_context(|| format!("serving on {addr}"))?;
        }
        Command::SynthCorpus { sentences, seed, mobility_rate, zipf_s, out_pool, out_gold } => {
            let mut cfg = SyntheticConfig::default();
            if let Some(n) = sentences {
                cfg.sentences = *n;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(r) = mobility_rate {
                cfg.mobility_rate = *r;
            }
            if let Some(z) = zipf_s {
                cfg.zipf_s = *z;
            }
            let corpus = generate_corpus(&cfg);
            let pool: SentencePool = corpus.iter().map(|s| s.sentence.clone()).collect();
            let gold: Vec<SentenceAnnotation> = corpus.into_iter().map(|s| s.gold).collect();
            pool.save(out_pool)?;
            write_jsonl(out_gold, &gold)?;
            let counts = EntityCounts::from_annotations(&gold);
            out.emit(&json!({"config": cfg, "counts": counts}), || counts.to_table("synthetic"))?;
        }
    }
    Ok(Outcome::Ok)
}

fn ingest_inputs(inputs: &[PathBuf], source_tag: &str) -> Result<IngestReport> {
    let (dirs, files): (Vec<&PathBuf>, Vec<&PathBuf>) = inputs.iter().partition(|p| p.is_dir());
    let mut report = IngestReport::default();
    for d in dirs {
        let r = ingest_dir(d, source_tag)?;
        report.documents.extend(r.documents);
        report.errors.extend(r.errors);
    }
    if !files.is_empty() {
        let files: Vec<PathBuf> = files.into_iter().cloned().collect();
        let r = ingest_documents(&files, source_tag)?;
        report.documents.extend(r.documents);
        report.errors.extend(r.errors);
    }
    Ok(report)
}
