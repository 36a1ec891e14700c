//! Sequence taggers: a linear-chain CRF and an averaged perceptron sharing
//! one feature set, one parameter layout and one decoder.

pub mod crf;
pub mod features;
pub mod model;
pub mod perceptron;

use rayon::prelude::*;

pub use crf::{crf_objective, forward_backward, train_crf, ForwardBackward, Gradient};
pub use features::{word_shape, FeatureExtractor, DEFAULT_HASH_BUCKETS};
pub use model::{predict_tags, TaggerKind, TaggerModel, TrainConfig, NUM_TAGS};
pub use perceptron::train_perceptron;

use crate::annotation::{spans_to_bio, EntityType, SentenceAnnotation, Tag};
use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// A sentence reduced to per-token feature ids and its gold tags for one type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub features: Vec<Vec<u32>>,
    pub tags: Vec<Tag>,
}

/// Encodes labeled sentences for one entity type.
pub fn encode_examples(
    extractor: &FeatureExtractor,
    etype: EntityType,
    data: &[(&Sentence, &SentenceAnnotation)],
) -> Result<Vec<EncodedExample>> {
    data.par_iter()
        .map(|(s, ann)| {
            if s.sentence_id != ann.sentence_id {
                return Err(Error::SentenceMismatch);
            }
            Ok(EncodedExample { features: extractor.encode(s), tags: spans_to_bio(s, ann, etype).tags })
        })
        .collect()
}

/// Entity runs as half-open token ranges.
fn token_runs(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::B => {
                if let Some(s) = open.take() {
                    out.push((s, i));
                }
                open = Some(i);
            }
            Tag::I if open.is_some() => {}
            Tag::I => open = Some(i),
            Tag::O => {
                if let Some(s) = open.take() {
                    out.push((s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        out.push((s, tags.len()));
    }
    out
}

/// Exact span F1 of a model over encoded examples, pooled across sentences.
/// Returns 1.0 when neither gold nor predictions contain any entity.
pub fn exact_span_f1(model: &TaggerModel, data: &[EncodedExample]) -> f64 {
    let (tp, np, ng) = data
        .par_iter()
        .map(|ex| {
            let gold = token_runs(&ex.tags);
            let pred = token_runs(&model.viterbi(&ex.features));
            let tp = pred.iter().filter(|p| gold.contains(p)).count();
            (tp, pred.len(), gold.len())
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if np + ng == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (np + ng) as f64
}

/// Keeps the best model seen on validation and signals when patience runs out.
pub(crate) struct ValidationTracker<'a> {
    valid: &'a [EncodedExample],
    patience: usize,
    best: Option<(f64, TaggerModel)>,
    since_best: usize,
}

pub(crate) fn best_of_validation(valid: &[EncodedExample], patience: usize) -> ValidationTracker<'_> {
    ValidationTracker { valid, patience, best: None, since_best: 0 }
}

impl ValidationTracker<'_> {
    /// Returns true when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, model: &TaggerModel) -> bool {
        if self.valid.is_empty() {
            return false;
        }
        let f1 = exact_span_f1(model, self.valid);
        // ties go to the later, longer-trained weights; only a strict gain
        // resets patience
        let prev = self.best.as_ref().map(|(b, _)| *b);
        if prev.is_none_or(|b| f1 >= b) {
            self.best = Some((f1, model.clone()));
        }
        if prev.is_none_or(|b| f1 > b) {
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            log::debug!("early stop at epoch {epoch}, best validation F1 {:.4}", prev.unwrap_or(0.0));
            return true;
        }
        false
    }

    pub(crate) fn finish(self, last: TaggerModel) -> TaggerModel {
        self.best.map(|(_, m)| m).unwrap_or(last)
    }
}

/// Trains one tagger of the given kind for one entity type.
pub fn train_tagger(
    kind: TaggerKind,
    etype: EntityType,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TaggerModel> {
    match kind {
        TaggerKind::Crf => train_crf(etype, train, valid, config),
        TaggerKind::Perceptron => train_perceptron(etype, train, valid, config),
    }
}

/// Encodes and trains in one step from annotated sentences.
pub fn train_on_annotations(
    kind: TaggerKind,
    etype: EntityType,
    train: &[(&Sentence, &SentenceAnnotation)],
    valid: &[(&Sentence, &SentenceAnnotation)],
    config: &TrainConfig,
) -> Result<TaggerModel> {
    let fx = FeatureExtractor::new(config.hash_buckets);
    let tr = encode_examples(&fx, etype, train)?;
    let va = encode_examples(&fx, etype, valid)?;
    train_tagger(kind, etype, &tr, &va, config)
}
