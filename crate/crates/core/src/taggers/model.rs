use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, DEFAULT_HASH_BUCKETS};
use crate::annotation::{BioTagSequence, EntityType, Tag};
use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const NUM_TAGS: usize = 3;
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    Crf,
    Perceptron,
}

impl std::fmt::Display for TaggerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaggerKind::Crf => "crf",
            TaggerKind::Perceptron => "perceptron",
        })
    }
}

impl std::str::FromStr for TaggerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "crf" => Ok(TaggerKind::Crf),
            "perceptron" | "ap" => Ok(TaggerKind::Perceptron),
            _ => Err(format!("unknown tagger kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// CRF: gradient steps; perceptron: passes over the data.
    pub epochs: usize,
    /// Early-stopping patience in epochs, on validation span F1 (CRF only).
    pub patience: usize,
    /// L2 penalty on the summed negative log-likelihood.
    pub l2: f64,
    /// Initial step on the per-sentence-averaged objective.
    pub learning_rate: f64,
    pub hash_buckets: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 30,
            l2: 0.1,
            learning_rate: 1.0,
            hash_buckets: DEFAULT_HASH_BUCKETS,
            seed: 13,
        }
    }
}

/// Whether `prev -> cur` is a legal BIO transition.
pub fn transition_allowed(prev: Tag, cur: Tag) -> bool {
    !(prev == Tag::O && cur == Tag::I)
}

pub fn start_allowed(cur: Tag) -> bool {
    cur != Tag::I
}

/// Linear sequence model shared by both tagger kinds: hashed emission
/// weights (`feature * 3 + tag`), start scores and a tag-transition matrix.
/// Illegal BIO transitions are masked at scoring time.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub kind: TaggerKind,
    pub etype: EntityType,
    pub config: TrainConfig,
    pub(crate) weights: Vec<f64>,
    pub(crate) start: [f64; NUM_TAGS],
    pub(crate) transitions: [[f64; NUM_TAGS]; NUM_TAGS],
}

impl TaggerModel {
    pub fn zeros(kind: TaggerKind, etype: EntityType, config: TrainConfig) -> Self {
        TaggerModel {
            kind,
            etype,
            weights: vec![0.0; config.hash_buckets as usize * NUM_TAGS],
            start: [0.0; NUM_TAGS],
            transitions: [[0.0; NUM_TAGS]; NUM_TAGS],
            config,
        }
    }

    pub fn extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(self.config.hash_buckets)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn start_scores(&self) -> [f64; NUM_TAGS] {
        self.start
    }

    pub fn set_start_scores(&mut self, s: [f64; NUM_TAGS]) {
        self.start = s;
    }

    pub fn transition_scores(&self) -> [[f64; NUM_TAGS]; NUM_TAGS] {
        self.transitions
    }

    pub fn set_transition_scores(&mut self, t: [[f64; NUM_TAGS]; NUM_TAGS]) {
        self.transitions = t;
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
            && self.start.iter().all(|&w| w == 0.0)
            && self.transitions.iter().flatten().all(|&w| w == 0.0)
    }

    /// Emission scores of one token for each tag.
    pub fn emission(&self, features: &[u32]) -> [f64; NUM_TAGS] {
        let mut e = [0.0; NUM_TAGS];
        for &f in features {
            let base = f as usize * NUM_TAGS;
            for (y, ey) in e.iter_mut().enumerate() {
                *ey += self.weights[base + y];
            }
        }
        e
    }

    /// Start score with masking (`-inf` for illegal starts).
    pub fn start_score(&self, y: usize) -> f64 {
        if start_allowed(Tag::from_index(y)) {
            self.start[y]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Transition score with masking.
    pub fn transition_score(&self, prev: usize, cur: usize) -> f64 {
        if transition_allowed(Tag::from_index(prev), Tag::from_index(cur)) {
            self.transitions[prev][cur]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Unnormalized score of a tag path.
    pub fn path_score(&self, features: &[Vec<u32>], tags: &[Tag]) -> f64 {
        let mut score = 0.0;
        for (t, (f, &y)) in features.iter().zip(tags).enumerate() {
            let y = y.index();
            score += self.emission(f)[y];
            score += if t == 0 { self.start_score(y) } else { self.transition_score(tags[t - 1].index(), y) };
        }
        score
    }

    /// Highest-scoring legal tag sequence. Ties go to the lower tag index
    /// (O < B < I), both when choosing predecessors and the final tag.
    pub fn viterbi(&self, features: &[Vec<u32>]) -> Vec<Tag> {
        let n = features.len();
        if n == 0 {
            return Vec::new();
        }
        let mut delta = vec![[f64::NEG_INFINITY; NUM_TAGS]; n];
        let mut back = vec![[0usize; NUM_TAGS]; n];
        let e0 = self.emission(&features[0]);
        for y in 0..NUM_TAGS {
            delta[0][y] = self.start_score(y) + e0[y];
        }
        for t in 1..n {
            let e = self.emission(&features[t]);
            for y in 0..NUM_TAGS {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (p, prev) in delta[t - 1].iter().enumerate() {
                    let s = prev + self.transition_score(p, y);
                    if s > best {
                        best = s;
                        arg = p;
                    }
                }
                delta[t][y] = best + e[y];
                back[t][y] = arg;
            }
        }
        let mut y = 0;
        for c in 1..NUM_TAGS {
            if delta[n - 1][c] > delta[n - 1][y] {
                y = c;
            }
        }
        let mut path = vec![Tag::O; n];
        for t in (0..n).rev() {
            path[t] = Tag::from_index(y);
            y = back[t][y];
        }
        path
    }

    pub fn decode(&self, sentence: &Sentence) -> BioTagSequence {
        let feats = self.extractor().encode(sentence);
        BioTagSequence { etype: self.etype, tags: self.viterbi(&feats) }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile::from(self);
        let text = serde_json::to_string(&file).map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        file.into_model()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&ModelFile::from(self)).map_err(|e| Error::json("model", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::json("model", e))?;
        file.into_model()
    }
}

/// On-disk model. Emission weights are stored sparsely as `[index, value]`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: TaggerKind,
    etype: EntityType,
    hash_buckets: u32,
    weights: Vec<(u32, f64)>,
    start: [f64; NUM_TAGS],
    transitions: [[f64; NUM_TAGS]; NUM_TAGS],
    config: TrainConfig,
}

impl From<&TaggerModel> for ModelFile {
    fn from(m: &TaggerModel) -> Self {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: m.kind,
            etype: m.etype,
            hash_buckets: m.config.hash_buckets,
            weights: m.weights.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i as u32, *w)).collect(),
            start: m.start,
            transitions: m.transitions,
            config: m.config.clone(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<TaggerModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelVersion(self.format_version));
        }
        let mut config = self.config;
        config.hash_buckets = self.hash_buckets;
        let mut m = TaggerModel::zeros(self.kind, self.etype, config);
        for (i, w) in self.weights {
            if let Some(slot) = m.weights.get_mut(i as usize) {
                *slot = w;
            }
        }
        m.start = self.start;
        m.transitions = self.transitions;
        Ok(m)
    }
}

/// Decodes a batch of sentences in parallel.
pub fn predict_tags(model: &TaggerModel, sentences: &[&Sentence]) -> Vec<BioTagSequence> {
    sentences.par_iter().map(|s| model.decode(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig { hash_buckets: 64, ..TrainConfig::default() }
    }

    #[test]
    fn zero_weights_decode_all_outside() {
        let m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, small());
        let s = Sentence::new("Pt walks to the door", Vec::<String>::new());
        assert_eq!(m.decode(&s).tags, vec![Tag::O; 5]);
        assert!(m.viterbi(&[]).is_empty());
    }

    #[test]
    fn hand_set_weights_favor_b() {
        let mut m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, small());
        let fx = m.extractor();
        let id = fx.hash("w.lower=walks") as usize;
        m.weights[id * NUM_TAGS + Tag::B.index()] = 2.0;
        let s = Sentence::new("He walks home", Vec::<String>::new());
        // only B on "walks" earns a non-zero score
        assert_eq!(m.decode(&s).tags, vec![Tag::O, Tag::B, Tag::O]);
    }

    #[test]
    fn masked_transitions() {
        let mut m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, small());
        // push every token toward I; the decoder must still emit valid BIO
        for w in m.weights.chunks_mut(NUM_TAGS) {
            w[Tag::I.index()] = 1.0;
        }
        let s = Sentence::new("a b c d", Vec::<String>::new());
        let bio = m.decode(&s);
        assert!(bio.is_valid());
        assert_eq!(bio.tags[0], Tag::B);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = TaggerModel::zeros(TaggerKind::Perceptron, EntityType::Mobility, small());
        m.weights[5] = 0.1 + 0.2;
        m.weights[17] = -1.0 / 3.0;
        m.transitions[1][2] = std::f64::consts::PI;
        let back = TaggerModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn batch_of_one_and_empty() {
        let m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, small());
        let s = Sentence::new("Pt walks", Vec::<String>::new());
        assert_eq!(predict_tags(&m, &[&s]), vec![m.decode(&s)]);
        assert!(predict_tags(&m, &[]).is_empty());
    }
}
