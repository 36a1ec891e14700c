//! Query-by-committee selection with density weighting, pre-tagging, and the
//! iteration driver that ties annotation, retraining and selection together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    bio_to_spans, AnnotationBatch, BatchSizing, BioTagSequence, EntityType, Phase, SentenceAnnotation, Split, Tag,
};
use crate::corpus::{Sentence, SentenceId, SentencePool};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_model;
use crate::jsonl;
use crate::taggers::{encode_examples, train_tagger, FeatureExtractor, TaggerKind, TaggerModel, TrainConfig};

pub const DEFAULT_BATCH_SIZE: usize = 125;
pub const DEFAULT_BETA: f64 = 1.0;
pub const PRETAG_ANNOTATOR: &str = "model";

/// Sparse vector with sorted, distinct indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Builds from unsorted entries, summing duplicates.
    pub fn from_entries(entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut m: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in entries {
            *m.entry(i).or_default() += v;
        }
        SparseVector { entries: m.into_iter().filter(|(_, v)| *v != 0.0).collect() }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector::from_entries(values.iter().enumerate().map(|(i, &v)| (i as u32, v)))
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    /// Unit-length copy; the zero vector stays zero.
    pub fn normalized(&self) -> SparseVector {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        SparseVector { entries: self.entries.iter().map(|&(i, v)| (i, v / n)).collect() }
    }
}

/// Cosine similarity clamped to [-1, 1]. A zero vector has similarity 0 to
/// everything.
pub fn cosine_similarity(u: &SparseVector, v: &SparseVector) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine similarity with a zero vector is taken as 0");
        return 0.0;
    }
    (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Something that turns the pool into one vector per sentence.
pub trait Vectorizer {
    fn vectorize(&self, pool: &SentencePool) -> Result<BTreeMap<SentenceId, SparseVector>>;
}

/// TF-IDF over lowercased alphanumeric tokens: raw term count times
/// `ln(N / df) + 1`, then L2-normalized. Term indices follow sorted
/// vocabulary order.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfIdf;

fn terms(s: &Sentence) -> Vec<String> {
    s.token_strs().into_iter().filter(|t| t.chars().any(char::is_alphanumeric)).map(str::to_lowercase).collect()
}

impl Vectorizer for TfIdf {
    fn vectorize(&self, pool: &SentencePool) -> Result<BTreeMap<SentenceId, SparseVector>> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let docs: Vec<Vec<String>> = pool.sentences().par_iter().map(terms).collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &docs {
            let uniq: BTreeSet<&str> = d.iter().map(String::as_str).collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = pool.len() as f64;
        let index: HashMap<&str, (u32, f64)> =
            df.iter().enumerate().map(|(i, (t, &c))| (*t, (i as u32, (n / c as f64).ln() + 1.0))).collect();
        Ok(pool
            .sentences()
            .par_iter()
            .zip(docs.par_iter())
            .map(|(s, d)| {
                let v = SparseVector::from_entries(d.iter().map(|t| {
                    let (i, idf) = index[t.as_str()];
                    (i, idf)
                }));
                (s.sentence_id.clone(), v.normalized())
            })
            .collect())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct EmbeddingRecord {
    sentence_id: SentenceId,
    vector: Vec<f64>,
}

/// Precomputed dense sentence vectors read from a JSONL file of
/// `{"sentence_id", "vector"}` records.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingVectors {
    vectors: BTreeMap<SentenceId, SparseVector>,
}

impl EmbeddingVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<EmbeddingRecord> = jsonl::read_jsonl(path)?;
        Ok(EmbeddingVectors {
            vectors: records
                .into_iter()
                .map(|r| (r.sentence_id, SparseVector::from_dense(&r.vector).normalized()))
                .collect(),
        })
    }
}

impl Vectorizer for EmbeddingVectors {
    fn vectorize(&self, pool: &SentencePool) -> Result<BTreeMap<SentenceId, SparseVector>> {
        pool.ids()
            .map(|id| {
                self.vectors
                    .get(id)
                    .map(|v| (id.to_string(), v.clone()))
                    .ok_or_else(|| Error::MissingVector(id.to_string()))
            })
            .collect()
    }
}

/// Per-sentence density, stamped with the fingerprint of the pool it was
/// computed over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCache {
    pub fingerprint: String,
    pub densities: BTreeMap<SentenceId, f64>,
}

impl DensityCache {
    pub fn get(&self, id: &str) -> Result<f64> {
        self.densities.get(id).copied().ok_or_else(|| Error::MissingDensity(id.to_string()))
    }

    /// Errors unless the cache was computed for exactly this pool.
    pub fn check(&self, pool: &SentencePool) -> Result<()> {
        let found = pool.fingerprint();
        if found != self.fingerprint {
            return Err(Error::StaleDensityCache { expected: self.fingerprint.clone(), found });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Loads and checks against the pool in one step.
    pub fn load_for(path: &Path, pool: &SentencePool) -> Result<Self> {
        let cache = DensityCache::load(path)?;
        cache.check(pool)?;
        Ok(cache)
    }
}

/// Mean cosine similarity of each sentence to every pool sentence, itself
/// included. With unit vectors this is the dot product with the mean vector,
/// so the cost is linear in the pool size.
pub fn precompute_density(pool: &SentencePool, vectors: &BTreeMap<SentenceId, SparseVector>) -> Result<DensityCache> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let units: Vec<SparseVector> = pool
        .ids()
        .map(|id| vectors.get(id).map(SparseVector::normalized).ok_or_else(|| Error::MissingVector(id.to_string())))
        .collect::<Result<_>>()?;
    let n = units.len() as f64;
    let centroid = SparseVector::from_entries(units.iter().flat_map(|u| u.entries.iter().map(|&(i, v)| (i, v / n))));
    let densities = pool
        .ids()
        .zip(units.par_iter().map(|u| u.dot(&centroid).clamp(-1.0, 1.0)).collect::<Vec<_>>())
        .map(|(id, d)| (id.to_string(), d))
        .collect();
    Ok(DensityCache { fingerprint: pool.fingerprint(), densities })
}

/// Vote entropy of a committee's hard tag votes, averaged over tokens,
/// natural log. Positions where every member agrees contribute 0.
pub fn vote_entropy(predictions: &[&[Tag]], members: usize) -> Result<f64> {
    let first = predictions.first().ok_or(Error::EmptyCommittee)?;
    let t_len = first.len();
    for p in predictions {
        if p.len() != t_len {
            return Err(Error::LengthMismatch { expected: t_len, found: p.len() });
        }
    }
    if t_len == 0 {
        return Ok(0.0);
    }
    let c = members as f64;
    let mut total = 0.0;
    for t in 0..t_len {
        let mut votes = [0usize; 3];
        for p in predictions {
            votes[p[t].index()] += 1;
        }
        for v in votes {
            if v > 0 {
                let q = v as f64 / c;
                total -= q * q.ln();
            }
        }
    }
    Ok(total / t_len as f64)
}

/// `ve · density^beta`. Negative densities (possible with signed embedding
/// vectors) are clamped to 0 so the score stays non-negative.
pub fn information_density(ve: f64, density: f64, beta: f64) -> f64 {
    ve * density.max(0.0).powf(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitteeConfig {
    pub members: [TaggerKind; 2],
    pub signal_etype: EntityType,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        CommitteeConfig { members: [TaggerKind::Crf, TaggerKind::Perceptron], signal_etype: EntityType::Action }
    }
}

/// Trained committee members for the disagreement signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Committee {
    pub signal_etype: EntityType,
    pub members: Vec<TaggerModel>,
}

impl Committee {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Vote entropy of the members' Viterbi outputs on one sentence.
    pub fn disagreement(&self, sentence: &Sentence) -> Result<f64> {
        let preds: Vec<BioTagSequence> = self.members.iter().map(|m| m.decode(sentence)).collect();
        let refs: Vec<&[Tag]> = preds.iter().map(|p| p.tags.as_slice()).collect();
        vote_entropy(&refs, self.size())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSentence {
    pub sentence_id: SentenceId,
    pub ve: f64,
    pub density: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub iteration: u32,
    pub k: usize,
    pub beta: f64,
    pub ranked: Vec<RankedSentence>,
    pub chosen: Vec<SentenceId>,
}

impl SelectionResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Sorts by combined score descending, then sentence id ascending.
pub fn rank(entries: &mut [RankedSentence]) {
    entries.sort_by(|a, b| b.combined.total_cmp(&a.combined).then_with(|| a.sentence_id.cmp(&b.sentence_id)));
}

fn take_top(ranked: &[RankedSentence], k: usize) -> Vec<SentenceId> {
    if k > ranked.len() {
        log::warn!("asked for {k} sentences but only {} are unlabeled; taking all", ranked.len());
    }
    ranked.iter().take(k).map(|r| r.sentence_id.clone()).collect()
}

/// Scores every unlabeled sentence and returns the top `k`.
pub fn select_batch(
    unlabeled: &[&Sentence],
    committee: &Committee,
    cache: &DensityCache,
    k: usize,
    beta: f64,
    iteration: u32,
) -> Result<SelectionResult> {
    if committee.members.is_empty() {
        return Err(Error::EmptyCommittee);
    }
    let mut ranked: Vec<RankedSentence> = unlabeled
        .par_iter()
        .map(|s| {
            let ve = committee.disagreement(s)?;
            let density = cache.get(&s.sentence_id)?;
            Ok(RankedSentence {
                sentence_id: s.sentence_id.clone(),
                ve,
                density,
                combined: information_density(ve, density, beta),
            })
        })
        .collect::<Result<_>>()?;
    rank(&mut ranked);
    let chosen = take_top(&ranked, k);
    Ok(SelectionResult { iteration, k, beta, ranked, chosen })
}

/// Uniform random selection, the baseline strategy.
pub fn select_random(unlabeled: &[&Sentence], k: usize, iteration: u32, seed: u64) -> SelectionResult {
    let mut ids: Vec<SentenceId> = unlabeled.iter().map(|s| s.sentence_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(iteration) << 32));
    ids.shuffle(&mut rng);
    let ranked: Vec<RankedSentence> = ids
        .into_iter()
        .map(|sentence_id| RankedSentence { sentence_id, ve: 0.0, density: 0.0, combined: 0.0 })
        .collect();
    let chosen = take_top(&ranked, k);
    SelectionResult { iteration, k, beta: 0.0, ranked, chosen }
}

/// Pre-tags sentences with one model per entity type, merging the decoded
/// spans into a single annotation per sentence.
pub fn pretag_batch(models: &[TaggerModel], batch: &[&Sentence]) -> Vec<SentenceAnnotation> {
    batch
        .par_iter()
        .map(|s| {
            let mut spans: Vec<_> = models.iter().flat_map(|m| bio_to_spans(s, &m.decode(s))).collect();
            spans.sort();
            SentenceAnnotation::new(s.sentence_id.clone(), Phase::Pretag, PRETAG_ANNOTATOR, spans)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Committee vote entropy weighted by density.
    DensityQbc,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub k: usize,
    pub beta: f64,
    pub sizing: BatchSizing,
    pub committee: CommitteeConfig,
    pub strategy: SelectionStrategy,
    /// Types that get a pre-tagging model and a validation score.
    pub etypes: Vec<EntityType>,
    pub train: TrainConfig,
    /// Stop after this many closed iterations (none: run until the pool is
    /// exhausted).
    pub max_iterations: Option<u32>,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            k: DEFAULT_BATCH_SIZE,
            beta: DEFAULT_BETA,
            sizing: BatchSizing::default(),
            committee: CommitteeConfig::default(),
            strategy: SelectionStrategy::DensityQbc,
            etypes: EntityType::IN_SCOPE.to_vec(),
            train: TrainConfig::default(),
            max_iterations: None,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub unlabeled: usize,
}

/// One closed iteration: what was labeled, and how the retrained taggers
/// scored on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Sentences whose gold annotation closed this iteration.
    pub labeled: Vec<SentenceId>,
    /// Sentences selected for the next batch.
    pub selected: Vec<SentenceId>,
    pub counts: SplitCounts,
    pub validation_f1: BTreeMap<EntityType, f64>,
    pub started_at: u64,
    pub finished_at: u64,
    pub annotators: Vec<String>,
    pub terminal: bool,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// In-memory state of the loop: the candidate pool, labeled sentences with
/// their split, the open batch, and the current models.
#[derive(Debug, Clone)]
pub struct ActiveLearner {
    pub config: LearnerConfig,
    pool: SentencePool,
    density: DensityCache,
    labeled: BTreeMap<SentenceId, (SentenceAnnotation, Split)>,
    open_batch: Option<AnnotationBatch>,
    iteration: u32,
    committee: Option<Committee>,
    taggers: BTreeMap<EntityType, TaggerModel>,
    last_selection: Option<SelectionResult>,
    history: Vec<IterationRecord>,
    terminal: bool,
}

impl ActiveLearner {
    pub fn new(pool: SentencePool, density: DensityCache, config: LearnerConfig) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        density.check(&pool)?;
        Ok(ActiveLearner {
            config,
            pool,
            density,
            labeled: BTreeMap::new(),
            open_batch: None,
            iteration: 0,
            committee: None,
            taggers: BTreeMap::new(),
            last_selection: None,
            history: Vec::new(),
            terminal: false,
        })
    }

    pub fn pool(&self) -> &SentencePool {
        &self.pool
    }

    pub fn density(&self) -> &DensityCache {
        &self.density
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn open_batch(&self) -> Option<&AnnotationBatch> {
        self.open_batch.as_ref()
    }

    pub fn committee(&self) -> Option<&Committee> {
        self.committee.as_ref()
    }

    pub fn taggers(&self) -> &BTreeMap<EntityType, TaggerModel> {
        &self.taggers
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn last_selection(&self) -> Option<&SelectionResult> {
        self.last_selection.as_ref()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn labeled(&self) -> impl Iterator<Item = (&SentenceAnnotation, Split)> {
        self.labeled.values().map(|(a, s)| (a, *s))
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        self.labeled.contains_key(id)
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    /// Sentences that are neither labeled nor waiting in the open batch.
    pub fn unlabeled(&self) -> Vec<&Sentence> {
        let pending: BTreeSet<&str> =
            self.open_batch.iter().flat_map(|b| b.sentence_ids.iter().map(String::as_str)).collect();
        self.pool
            .sentences()
            .iter()
            .filter(|s| !self.labeled.contains_key(&s.sentence_id) && !pending.contains(s.sentence_id.as_str()))
            .collect()
    }

    /// Opens the manually chosen seed batch (iteration 0).
    pub fn open_seed(&mut self, ids: Vec<SentenceId>) -> Result<&AnnotationBatch> {
        if self.open_batch.is_some() || self.iteration > 0 {
            return Err(Error::Workflow("seed batch can only be opened on a fresh learner".into()));
        }
        for id in &ids {
            if self.pool.get(id).is_none() {
                return Err(Error::UnknownSentence(id.clone()));
            }
        }
        self.open_batch = Some(AnnotationBatch::new(0, ids, self.config.sizing));
        Ok(self.open_batch.as_ref().unwrap())
    }

    /// Restores an open batch, e.g. after reloading a project.
    pub fn restore_open_batch(&mut self, batch: AnnotationBatch) {
        self.open_batch = Some(batch);
    }

    /// Restores labeled sentences and the iteration counter without training.
    pub fn restore_labeled(&mut self, items: impl IntoIterator<Item = (SentenceAnnotation, Split)>, iteration: u32) {
        for (a, s) in items {
            self.labeled.insert(a.sentence_id.clone(), (a, s));
        }
        self.iteration = iteration;
    }

    pub fn restore_models(&mut self, committee: Option<Committee>, taggers: BTreeMap<EntityType, TaggerModel>) {
        self.committee = committee;
        self.taggers = taggers;
    }

    pub fn restore_selection(&mut self, selection: SelectionResult) {
        self.last_selection = Some(selection);
    }

    pub fn restore_history(&mut self, history: Vec<IterationRecord>) {
        self.terminal = history.last().is_some_and(|r| r.terminal);
        self.history = history;
    }

    fn split_data(&self, split: Split) -> Vec<(&Sentence, &SentenceAnnotation)> {
        self.labeled
            .values()
            .filter(|(_, s)| *s == split)
            .map(|(a, _)| (self.pool.get(&a.sentence_id).expect("labeled ids are in the pool"), a))
            .collect()
    }

    /// Retrains the committee and per-type taggers on the labeled set.
    pub fn retrain(&mut self) -> Result<()> {
        let train = self.split_data(Split::Train);
        let valid = self.split_data(Split::Validation);
        if train.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let cfg = &self.config.train;
        let fx = FeatureExtractor::new(cfg.hash_buckets);
        let mut needed: BTreeSet<EntityType> = self.config.etypes.iter().copied().collect();
        needed.insert(self.config.committee.signal_etype);
        let encoded: BTreeMap<EntityType, _> = needed
            .iter()
            .map(|&t| Ok((t, (encode_examples(&fx, t, &train)?, encode_examples(&fx, t, &valid)?))))
            .collect::<Result<_>>()?;

        // (kind, type) pairs to train; the committee's CRF doubles as that
        // type's pre-tagger
        let mut jobs: BTreeSet<(TaggerKind, EntityType)> =
            self.config.etypes.iter().map(|&t| (TaggerKind::Crf, t)).collect();
        for kind in self.config.committee.members {
            jobs.insert((kind, self.config.committee.signal_etype));
        }
        let jobs: Vec<_> = jobs.into_iter().collect();
        let trained: Vec<((TaggerKind, EntityType), TaggerModel)> = jobs
            .par_iter()
            .map(|&(kind, t)| {
                let (tr, va) = &encoded[&t];
                Ok(((kind, t), train_tagger(kind, t, tr, va, cfg)?))
            })
            .collect::<Result<_>>()?;
        let trained: BTreeMap<_, _> = trained.into_iter().collect();
        let signal = self.config.committee.signal_etype;
        self.committee = Some(Committee {
            signal_etype: signal,
            members: self.config.committee.members.iter().map(|&k| trained[&(k, signal)].clone()).collect(),
        });
        self.taggers = self.config.etypes.iter().map(|&t| (t, trained[&(TaggerKind::Crf, t)].clone())).collect();
        Ok(())
    }

    pub fn validation_f1(&self) -> BTreeMap<EntityType, f64> {
        let valid = self.split_data(Split::Validation);
        self.taggers.iter().map(|(&t, m)| (t, evaluate_model(m, &valid).f1)).collect()
    }

    /// Selects the next batch from the unlabeled sentences.
    pub fn select_next(&self, iteration: u32) -> Result<SelectionResult> {
        let unlabeled = self.unlabeled();
        match self.config.strategy {
            SelectionStrategy::Random => Ok(select_random(&unlabeled, self.config.k, iteration, self.config.seed)),
            SelectionStrategy::DensityQbc => {
                let committee =
                    self.committee.as_ref().ok_or_else(|| Error::Workflow("committee has not been trained".into()))?;
                select_batch(&unlabeled, committee, &self.density, self.config.k, self.config.beta, iteration)
            }
        }
    }

    /// Closes the open batch with its gold annotations, retrains, records
    /// validation scores and opens the next batch. When the pool is
    /// exhausted or the iteration budget is spent, the record is flagged
    /// terminal and no batch is opened.
    pub fn run_iteration(&mut self, gold: &[SentenceAnnotation]) -> Result<&IterationRecord> {
        let started_at = unix_now();
        let batch = self.open_batch.as_ref().ok_or_else(|| Error::Workflow("no open batch to close".into()))?;
        let by_id: BTreeMap<&str, &SentenceAnnotation> =
            gold.iter().filter(|a| a.phase == Phase::Gold).map(|a| (a.sentence_id.as_str(), a)).collect();
        let pending: Vec<String> =
            batch.sentence_ids.iter().filter(|id| !by_id.contains_key(id.as_str())).cloned().collect();
        if !pending.is_empty() {
            return Err(Error::PendingAnnotations(pending));
        }
        let batch = self.open_batch.take().expect("checked above");
        let mut annotators = BTreeSet::new();
        for (id, split) in batch.sentence_ids.iter().zip(&batch.split_hint) {
            let ann = by_id[id.as_str()];
            annotators.insert(ann.annotator.clone());
            self.labeled.insert(id.clone(), ((*ann).clone(), *split));
        }
        self.iteration += 1;
        self.retrain()?;
        let validation_f1 = self.validation_f1();

        let budget_spent = self.config.max_iterations.is_some_and(|m| self.iteration >= m);
        let unlabeled_left = self.unlabeled().len();
        let mut selected = Vec::new();
        if !budget_spent && unlabeled_left > 0 {
            let sel = self.select_next(self.iteration)?;
            selected = sel.chosen.clone();
            self.open_batch = Some(AnnotationBatch::new(self.iteration, sel.chosen.clone(), self.config.sizing));
            self.last_selection = Some(sel);
        }
        self.terminal = selected.is_empty();
        let counts = SplitCounts {
            train: self.labeled.values().filter(|(_, s)| *s == Split::Train).count(),
            validation: self.labeled.values().filter(|(_, s)| *s == Split::Validation).count(),
            unlabeled: self.unlabeled().len(),
        };
        self.history.push(IterationRecord {
            iteration: self.iteration,
            labeled: batch.sentence_ids,
            selected,
            counts,
            validation_f1,
            started_at,
            finished_at: unix_now(),
            annotators: annotators.into_iter().collect(),
            terminal: self.terminal,
        });
        Ok(self.history.last().unwrap())
    }
}
