//! On-disk project state. Everything that changes is an append-only JSON
//! lines log; opening a project replays the logs into an [`ActiveLearner`].
//!
//! Layout:
//!
//! ```text
//! config.json
//! pool.jsonl
//! keywords.json
//! density.cache
//! annotations/{pretag,blind,gold}.jsonl
//! batches.jsonl          opened batches, one per iteration
//! iterations.jsonl       closed iterations
//! models/iter-NNNN/      committee and per-type taggers after iteration N
//! selections/iter-NNNN.json
//! .lock
//! ```
//!
//! The iteration record is the commit point of [`Project::run_iteration`]:
//! models and the selection are written before it, the next batch after it.
//! A crash between the two is repaired on open from the record's selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::active_learning::{
    pretag_batch, unix_now, ActiveLearner, Committee, DensityCache, IterationRecord, LearnerConfig, SelectionResult,
    Vectorizer,
};
use crate::annotation::{
    has_hard_error, to_conll, validate_annotation, AnnotationBatch, EntityType, Finding, Phase, SentenceAnnotation,
    Split,
};
use crate::corpus::{SentenceId, SentencePool};
use crate::error::{Error, Result};
use crate::evaluation::{stratified_kfold, EntityCounts};
use crate::jsonl::{append_jsonl, read_jsonl, read_log};
use crate::retrieval::KeywordSet;
use crate::taggers::TaggerModel;

pub const PHASES: [Phase; 3] = [Phase::Pretag, Phase::Blind, Phase::Gold];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub learner: LearnerConfig,
    /// Distinct blind annotators a sentence needs before gold is accepted.
    pub min_blind_annotators: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig { learner: LearnerConfig::default(), min_blind_annotators: 2 }
    }
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// File locations inside a project directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectPaths {
    root: PathBuf,
}

impl ProjectPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProjectPaths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn pool(&self) -> PathBuf {
        self.root.join("pool.jsonl")
    }

    pub fn keywords(&self) -> PathBuf {
        self.root.join("keywords.json")
    }

    pub fn density(&self) -> PathBuf {
        self.root.join("density.cache")
    }

    pub fn annotations_dir(&self) -> PathBuf {
        self.root.join("annotations")
    }

    pub fn annotations(&self, phase: Phase) -> PathBuf {
        self.annotations_dir().join(format!("{phase}.jsonl"))
    }

    pub fn batches(&self) -> PathBuf {
        self.root.join("batches.jsonl")
    }

    pub fn iterations(&self) -> PathBuf {
        self.root.join("iterations.jsonl")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn iteration_models(&self, iteration: u32) -> PathBuf {
        self.models_dir().join(format!("iter-{iteration:04}"))
    }

    pub fn selections_dir(&self) -> PathBuf {
        self.root.join("selections")
    }

    pub fn selection(&self, iteration: u32) -> PathBuf {
        self.selections_dir().join(format!("iter-{iteration:04}.json"))
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// The closed-iteration log. Iteration numbers run 1, 2, 3, ... with no gaps.
#[derive(Debug, Clone)]
pub struct IterationLog {
    path: PathBuf,
    records: Vec<IterationRecord>,
    quarantined: Option<PathBuf>,
}

impl IterationLog {
    pub fn open(path: &Path) -> Result<Self> {
        let read = read_log::<IterationRecord>(path)?;
        for (i, r) in read.records.iter().enumerate() {
            if r.iteration != i as u32 + 1 {
                return Err(Error::IterationOrder { current: i as u32, found: r.iteration });
            }
        }
        Ok(IterationLog { path: path.to_path_buf(), records: read.records, quarantined: read.quarantined })
    }

    /// Number of the last closed iteration, 0 when none.
    pub fn current(&self) -> u32 {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn quarantined(&self) -> Option<&Path> {
        self.quarantined.as_deref()
    }

    pub fn record(&mut self, record: IterationRecord) -> Result<()> {
        let current = self.current();
        if record.iteration != current + 1 {
            return Err(Error::IterationOrder { current, found: record.iteration });
        }
        append_jsonl(&self.path, std::slice::from_ref(&record))?;
        self.records.push(record);
        Ok(())
    }
}

/// A record refused by an import or submission, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub sentence_id: SentenceId,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<Finding>,
}

/// Non-blocking lint findings attached to an accepted record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFindings {
    pub sentence_id: SentenceId,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub imported: usize,
    pub rejected: Vec<Rejection>,
    pub warnings: Vec<RecordFindings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Standoff,
    Conll,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Standoff => "jsonl",
            ExportFormat::Conll => "conll",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Standoff => "standoff",
            ExportFormat::Conll => "conll",
        })
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "standoff" | "jsonl" | "json" => Ok(ExportFormat::Standoff),
            "conll" => Ok(ExportFormat::Conll),
            _ => Err(format!("unknown export format {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
    pub counts: EntityCounts,
}

/// Renders annotations in one format, ordered by sentence id.
pub fn render_dataset(pool: &SentencePool, gold: &[SentenceAnnotation], format: ExportFormat) -> Result<String> {
    let mut sorted: Vec<&SentenceAnnotation> = gold.iter().collect();
    sorted.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
    let mut out = String::new();
    for a in sorted {
        match format {
            ExportFormat::Standoff => {
                out.push_str(&serde_json::to_string(a).map_err(|e| Error::json("standoff export", e))?);
                out.push('\n');
            }
            ExportFormat::Conll => {
                let s = pool.get(&a.sentence_id).ok_or_else(|| Error::UnknownSentence(a.sentence_id.clone()))?;
                out.push_str(&to_conll(s, a, &EntityType::IN_SCOPE));
            }
        }
    }
    Ok(out)
}

/// Writes `gold.<ext>`, or `fold-<i>.<ext>` per stratified fold when `folds`
/// is given as `(k, seed)`.
pub fn write_dataset(
    pool: &SentencePool,
    gold: &[SentenceAnnotation],
    out_dir: &Path,
    format: ExportFormat,
    folds: Option<(usize, u64)>,
) -> Result<ExportReport> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let ext = format.extension();
    match folds {
        None => {
            let path = out_dir.join(format!("gold.{ext}"));
            fs::write(&path, render_dataset(pool, gold, format)?).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
        Some((k, seed)) => {
            let assignment = stratified_kfold(gold, k, seed)?;
            for (i, ids) in assignment.folds.iter().enumerate() {
                let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                let part: Vec<SentenceAnnotation> =
                    gold.iter().filter(|a| ids.contains(a.sentence_id.as_str())).cloned().collect();
                let path = out_dir.join(format!("fold-{i}.{ext}"));
                fs::write(&path, render_dataset(pool, &part, format)?).map_err(|e| Error::io(&path, e))?;
                files.push(path);
            }
        }
    }
    Ok(ExportReport { files, counts: EntityCounts::from_annotations(gold) })
}

/// Everything replay must reproduce, in comparable form.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectSnapshot {
    pub iteration: u32,
    pub pool_fingerprint: String,
    pub logs: BTreeMap<Phase, Vec<SentenceAnnotation>>,
    pub labeled: Vec<(SentenceAnnotation, Split)>,
    pub open_batch: Option<AnnotationBatch>,
    pub history: Vec<IterationRecord>,
    pub committee: Option<Committee>,
    pub taggers: BTreeMap<EntityType, TaggerModel>,
    pub terminal: bool,
}

fn acquire_lock(path: &Path) -> Result<File> {
    let f = OpenOptions::new().create(true).truncate(false).write(true).open(path).map_err(|e| Error::io(path, e))?;
    match f.try_lock() {
        Ok(()) => Ok(f),
        Err(TryLockError::WouldBlock) => Err(Error::ProjectLocked(path.to_path_buf())),
        Err(TryLockError::Error(e)) => Err(Error::io(path, e)),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn touch(path: &Path) -> Result<()> {
    OpenOptions::new().create(true).append(true).open(path).map(drop).map_err(|e| Error::io(path, e))
}

fn tagger_file(etype: EntityType) -> String {
    format!("tagger-{}.json", etype.name().to_ascii_lowercase())
}

/// Creates the directory skeleton and writes the config. The directory must
/// be absent or empty.
pub fn init_project(dir: &Path, config: &ProjectConfig) -> Result<Project> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            return Err(Error::ProjectExists(dir.to_path_buf()));
        }
    }
    let paths = ProjectPaths::new(dir);
    create_dir(dir)?;
    let lock = acquire_lock(&paths.lock())?;
    for d in [paths.annotations_dir(), paths.models_dir(), paths.selections_dir()] {
        create_dir(&d)?;
    }
    config.save(&paths.config())?;
    for p in [paths.pool(), paths.batches(), paths.iterations()] {
        touch(&p)?;
    }
    for phase in PHASES {
        touch(&paths.annotations(phase))?;
    }
    Project::load(paths, Some(lock))
}

/// A loaded project. Opened with [`Project::open`] it holds the single-writer
/// lock; [`Project::open_read_only`] takes no lock and refuses mutations.
#[derive(Debug)]
pub struct Project {
    paths: ProjectPaths,
    config: ProjectConfig,
    pool: SentencePool,
    keywords: Option<KeywordSet>,
    logs: BTreeMap<Phase, Vec<SentenceAnnotation>>,
    batches: Vec<AnnotationBatch>,
    iterations: IterationLog,
    learner: Option<ActiveLearner>,
    quarantined: Vec<PathBuf>,
    lock: Option<File>,
}

impl Project {
    pub fn open(dir: &Path) -> Result<Self> {
        let paths = ProjectPaths::new(dir);
        if !paths.config().exists() {
            return Err(Error::io(paths.config(), std::io::ErrorKind::NotFound.into()));
        }
        let lock = acquire_lock(&paths.lock())?;
        Project::load(paths, Some(lock))
    }

    pub fn open_read_only(dir: &Path) -> Result<Self> {
        Project::load(ProjectPaths::new(dir), None)
    }

    fn load(paths: ProjectPaths, lock: Option<File>) -> Result<Self> {
        let config = ProjectConfig::load(&paths.config())?;
        let pool = if paths.pool().exists() { SentencePool::load(&paths.pool())? } else { SentencePool::default() };
        let keywords = match paths.keywords().exists() {
            true => Some(KeywordSet::load(&paths.keywords())?),
            false => None,
        };
        let mut quarantined = Vec::new();
        let mut logs = BTreeMap::new();
        for phase in PHASES {
            let read = read_log::<SentenceAnnotation>(&paths.annotations(phase))?;
            quarantined.extend(read.quarantined);
            logs.insert(phase, read.records);
        }
        let read = read_log::<AnnotationBatch>(&paths.batches())?;
        quarantined.extend(read.quarantined);
        let batches = read.records;
        let iterations = IterationLog::open(&paths.iterations())?;
        quarantined.extend(iterations.quarantined().map(Path::to_path_buf));
        let learner = if pool.is_empty() {
            None
        } else {
            let density = DensityCache::load_for(&paths.density(), &pool)?;
            Some(ActiveLearner::new(pool.clone(), density, config.learner.clone())?)
        };
        let mut project =
            Project { paths, config, pool, keywords, logs, batches, iterations, learner, quarantined, lock };
        project.replay()?;
        Ok(project)
    }

    /// The batch for an iteration: from the batch log, or rebuilt from the
    /// selection in the previous iteration's record.
    fn batch_for(&self, iteration: u32) -> Option<AnnotationBatch> {
        if let Some(b) = self.batches.iter().rev().find(|b| b.iteration == iteration) {
            return Some(b.clone());
        }
        let record = self.iterations.records().get((iteration as usize).checked_sub(1)?)?;
        (!record.selected.is_empty())
            .then(|| AnnotationBatch::new(iteration, record.selected.clone(), self.config.learner.sizing))
    }

    fn replay(&mut self) -> Result<()> {
        let iteration = self.iterations.current();
        let Some(learner) = self.learner.as_ref() else {
            if iteration > 0 || !self.batches.is_empty() {
                return Err(Error::EmptyPool);
            }
            return Ok(());
        };
        let mut learner = learner.clone();
        let gold = self.latest(Phase::Gold);
        let mut labeled = Vec::new();
        for it in 0..iteration {
            let batch = self
                .batch_for(it)
                .ok_or_else(|| Error::Workflow(format!("no batch recorded for closed iteration {it}")))?;
            for (id, split) in batch.sentence_ids.iter().zip(&batch.split_hint) {
                let ann = gold
                    .get(id.as_str())
                    .ok_or_else(|| Error::Workflow(format!("closed sentence {id} has no gold record")))?;
                labeled.push(((*ann).clone(), *split));
            }
        }
        learner.restore_labeled(labeled, iteration);
        learner.restore_history(self.iterations.records().to_vec());
        if iteration > 0 {
            let (committee, taggers) = self.load_models(iteration)?;
            learner.restore_models(Some(committee), taggers);
        }
        if let Ok(sel) = SelectionResult::load(&self.paths.selection(iteration)) {
            learner.restore_selection(sel);
        }
        let mut repaired = None;
        if !learner.is_terminal() {
            if let Some(batch) = self.batch_for(iteration) {
                if !self.batches.iter().any(|b| b.iteration == iteration) {
                    repaired = Some(batch.clone());
                }
                learner.restore_open_batch(batch);
            }
        }
        self.learner = Some(learner);
        if self.is_writable() {
            if let Some(batch) = repaired {
                log::warn!("reopening batch for iteration {iteration} from its selection");
                append_jsonl(&self.paths.batches(), std::slice::from_ref(&batch))?;
                self.batches.push(batch);
            }
            self.write_pretags()?;
        }
        Ok(())
    }

    fn load_models(&self, iteration: u32) -> Result<(Committee, BTreeMap<EntityType, TaggerModel>)> {
        let dir = self.paths.iteration_models(iteration);
        let cfg = &self.config.learner;
        let members = (0..cfg.committee.members.len())
            .map(|i| TaggerModel::load(&dir.join(format!("committee-{i}.json"))))
            .collect::<Result<_>>()?;
        let taggers = cfg
            .etypes
            .iter()
            .map(|&t| Ok((t, TaggerModel::load(&dir.join(tagger_file(t)))?)))
            .collect::<Result<_>>()?;
        Ok((Committee { signal_etype: cfg.committee.signal_etype, members }, taggers))
    }

    fn save_models(&self, iteration: u32, learner: &ActiveLearner) -> Result<()> {
        let dir = self.paths.iteration_models(iteration);
        create_dir(&dir)?;
        if let Some(c) = learner.committee() {
            for (i, m) in c.members.iter().enumerate() {
                m.save(&dir.join(format!("committee-{i}.json")))?;
            }
        }
        for (&t, m) in learner.taggers() {
            m.save(&dir.join(tagger_file(t)))?;
        }
        Ok(())
    }

    /// Pre-tags open-batch sentences that have no pretag record yet.
    fn write_pretags(&mut self) -> Result<()> {
        let Some(learner) = &self.learner else {
            return Ok(());
        };
        let Some(batch) = learner.open_batch() else {
            return Ok(());
        };
        if learner.taggers().is_empty() {
            return Ok(());
        }
        let have: BTreeSet<&str> = self.logs[&Phase::Pretag].iter().map(|a| a.sentence_id.as_str()).collect();
        let missing: Vec<_> = batch
            .sentence_ids
            .iter()
            .filter(|id| !have.contains(id.as_str()))
            .filter_map(|id| self.pool.get(id))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let models: Vec<TaggerModel> = learner.taggers().values().cloned().collect();
        let records = pretag_batch(&models, &missing);
        append_jsonl(&self.paths.annotations(Phase::Pretag), &records)?;
        self.logs.get_mut(&Phase::Pretag).unwrap().extend(records);
        Ok(())
    }

    pub fn paths(&self) -> &ProjectPaths {
        &self.paths
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn pool(&self) -> &SentencePool {
        &self.pool
    }

    pub fn keywords(&self) -> Option<&KeywordSet> {
        self.keywords.as_ref()
    }

    pub fn learner(&self) -> Option<&ActiveLearner> {
        self.learner.as_ref()
    }

    pub fn iteration(&self) -> u32 {
        self.iterations.current()
    }

    pub fn history(&self) -> &[IterationRecord] {
        self.iterations.records()
    }

    pub fn batches(&self) -> &[AnnotationBatch] {
        &self.batches
    }

    pub fn open_batch(&self) -> Option<&AnnotationBatch> {
        self.learner.as_ref().and_then(ActiveLearner::open_batch)
    }

    pub fn is_terminal(&self) -> bool {
        self.learner.as_ref().is_some_and(ActiveLearner::is_terminal)
    }

    /// Log files whose torn final line was moved aside while loading.
    pub fn quarantined(&self) -> &[PathBuf] {
        &self.quarantined
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    fn ensure_writable(&self) -> Result<()> {
        if self.is_writable() {
            Ok(())
        } else {
            Err(Error::Workflow("project was opened read-only".into()))
        }
    }

    fn learner_ref(&self) -> Result<&ActiveLearner> {
        self.learner.as_ref().ok_or(Error::EmptyPool)
    }

    /// All records of one phase in log order.
    pub fn log(&self, phase: Phase) -> &[SentenceAnnotation] {
        &self.logs[&phase]
    }

    /// Latest record per sentence for a phase.
    pub fn latest(&self, phase: Phase) -> BTreeMap<&str, &SentenceAnnotation> {
        self.logs[&phase].iter().map(|a| (a.sentence_id.as_str(), a)).collect()
    }

    /// Latest blind record per annotator for one sentence.
    pub fn blind_for(&self, sentence_id: &str) -> BTreeMap<&str, &SentenceAnnotation> {
        self.logs[&Phase::Blind]
            .iter()
            .filter(|a| a.sentence_id == sentence_id)
            .map(|a| (a.annotator.as_str(), a))
            .collect()
    }

    /// Current gold set, one record per sentence, ordered by sentence id.
    pub fn gold(&self) -> Vec<SentenceAnnotation> {
        self.latest(Phase::Gold).into_values().cloned().collect()
    }

    pub fn snapshot(&self) -> ProjectSnapshot {
        let learner = self.learner.as_ref();
        ProjectSnapshot {
            iteration: self.iteration(),
            pool_fingerprint: self.pool.fingerprint(),
            logs: self.logs.clone(),
            labeled: learner.map(|l| l.labeled().map(|(a, s)| (a.clone(), s)).collect()).unwrap_or_default(),
            open_batch: self.open_batch().cloned(),
            history: self.history().to_vec(),
            committee: learner.and_then(|l| l.committee().cloned()),
            taggers: learner.map(|l| l.taggers().clone()).unwrap_or_default(),
            terminal: self.is_terminal(),
        }
    }

    /// Installs the sentence pool and precomputes densities. Only allowed
    /// before the seed batch is opened.
    pub fn set_pool(&mut self, pool: SentencePool, vectorizer: &dyn Vectorizer) -> Result<()> {
        self.ensure_writable()?;
        if !self.batches.is_empty() || self.iteration() > 0 {
            return Err(Error::Workflow("the pool is fixed once the seed batch is open".into()));
        }
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let vectors = vectorizer.vectorize(&pool)?;
        let density = crate::active_learning::precompute_density(&pool, &vectors)?;
        density.save(&self.paths.density())?;
        pool.save(&self.paths.pool())?;
        self.learner = Some(ActiveLearner::new(pool.clone(), density, self.config.learner.clone())?);
        self.pool = pool;
        Ok(())
    }

    pub fn set_keywords(&mut self, keywords: KeywordSet) -> Result<()> {
        self.ensure_writable()?;
        keywords.save(&self.paths.keywords())?;
        self.keywords = Some(keywords);
        Ok(())
    }

    /// Opens the hand-picked seed batch (iteration 0).
    pub fn open_seed(&mut self, ids: Vec<SentenceId>) -> Result<AnnotationBatch> {
        self.ensure_writable()?;
        let learner = self.learner.as_mut().ok_or(Error::EmptyPool)?;
        if ids.is_empty() {
            return Err(Error::Workflow("seed batch is empty".into()));
        }
        let batch = learner.open_seed(ids)?.clone();
        append_jsonl(&self.paths.batches(), std::slice::from_ref(&batch))?;
        self.batches.push(batch.clone());
        Ok(batch)
    }

    fn check_record(&self, rec: &SentenceAnnotation, allow_without_blind: bool) -> Result<Vec<Finding>, Rejection> {
        let reject = |reason: String, findings: Vec<Finding>| Rejection {
            sentence_id: rec.sentence_id.clone(),
            reason,
            findings,
        };
        if rec.annotator.trim().is_empty() {
            return Err(reject("annotator id is empty".into(), vec![]));
        }
        let Some(sentence) = self.pool.get(&rec.sentence_id) else {
            return Err(reject("unknown sentence id".into(), vec![]));
        };
        let findings = validate_annotation(sentence, rec);
        if has_hard_error(&findings) {
            let first = findings.iter().find(|f| f.is_error()).expect("has an error");
            let reason = format!("{:?}: {}", first.kind, first.message);
            return Err(reject(reason, findings));
        }
        if rec.phase == Phase::Gold {
            if self.learner.as_ref().is_some_and(|l| l.is_labeled(&rec.sentence_id)) {
                return Err(reject("sentence was closed in an earlier iteration".into(), findings));
            }
            let blind = self.blind_for(&rec.sentence_id).len();
            if !allow_without_blind && blind < self.config.min_blind_annotators {
                return Err(reject(
                    format!(
                        "gold needs blind annotations from {} annotators, found {blind}",
                        self.config.min_blind_annotators
                    ),
                    findings,
                ));
            }
        }
        Ok(findings)
    }

    /// Validates and appends records to a phase log. Each record's phase is
    /// set to `phase`. Gold records need blind records from
    /// `min_blind_annotators` distinct annotators unless
    /// `allow_without_blind` is set.
    pub fn import_annotations(
        &mut self,
        records: Vec<SentenceAnnotation>,
        phase: Phase,
        allow_without_blind: bool,
    ) -> Result<ImportReport> {
        self.ensure_writable()?;
        let mut report = ImportReport::default();
        let mut accepted = Vec::new();
        for mut rec in records {
            rec.phase = phase;
            match self.check_record(&rec, allow_without_blind) {
                Ok(findings) => {
                    if !findings.is_empty() {
                        report.warnings.push(RecordFindings { sentence_id: rec.sentence_id.clone(), findings });
                    }
                    accepted.push(rec);
                }
                Err(r) => report.rejected.push(r),
            }
        }
        append_jsonl(&self.paths.annotations(phase), &accepted)?;
        report.imported = accepted.len();
        self.logs.get_mut(&phase).unwrap().extend(accepted);
        Ok(report)
    }

    pub fn import_annotation_file(
        &mut self,
        path: &Path,
        phase: Phase,
        allow_without_blind: bool,
    ) -> Result<ImportReport> {
        let records: Vec<SentenceAnnotation> = read_jsonl(path)?;
        self.import_annotations(records, phase, allow_without_blind)
    }

    /// Closes the open batch with its gold records, retrains, selects and
    /// opens the next batch, and persists the result.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        self.ensure_writable()?;
        let learner = self.learner_ref()?;
        if learner.is_terminal() {
            return Err(Error::Workflow("the loop has terminated".into()));
        }
        let batch = learner.open_batch().ok_or_else(|| Error::Workflow("no open batch".into()))?;
        let gold_by_id = self.latest(Phase::Gold);
        let gold: Vec<SentenceAnnotation> =
            batch.sentence_ids.iter().filter_map(|id| gold_by_id.get(id.as_str()).map(|a| (*a).clone())).collect();
        let mut next = learner.clone();
        let record = next.run_iteration(&gold)?.clone();

        self.save_models(record.iteration, &next)?;
        if let (Some(sel), false) = (next.last_selection(), record.selected.is_empty()) {
            create_dir(&self.paths.selections_dir())?;
            sel.save(&self.paths.selection(record.iteration))?;
        }
        self.iterations.record(record.clone())?;
        if let Some(b) = next.open_batch() {
            append_jsonl(&self.paths.batches(), std::slice::from_ref(b))?;
            self.batches.push(b.clone());
        }
        self.learner = Some(next);
        self.write_pretags()?;
        log::info!(
            "iteration {} closed at {}: {} labeled, {} selected",
            record.iteration,
            unix_now(),
            record.labeled.len(),
            record.selected.len()
        );
        Ok(record)
    }

    /// Writes the gold set, optionally split into stratified folds.
    pub fn export_dataset(
        &self,
        out_dir: &Path,
        format: ExportFormat,
        folds: Option<(usize, u64)>,
    ) -> Result<ExportReport> {
        write_dataset(&self.pool, &self.gold(), out_dir, format, folds)
    }
}
