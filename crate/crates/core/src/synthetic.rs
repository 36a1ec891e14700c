//! Deterministic generator for a small clinical-style corpus with nested
//! gold spans. Mobility clauses are built from a trigger verb (Action) drawn
//! from a Zipf distribution, optional measurements (Quantification) and
//! optional support (Assistance). Distractor sentences carry no entities but
//! share subjects, numbers and function words with the mobility clauses.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{EntitySpan, EntityType, Phase, SentenceAnnotation};
use crate::corpus::Sentence;

pub const SYNTHETIC_ANNOTATOR: &str = "synthetic";

const SUBJECTS: &[&str] = &["Pt", "Patient", "She", "He", "The patient", "Resident", "Client"];

const ACTIONS: &[&str] = &[
    "ambulated",
    "walked",
    "transferred",
    "stood up",
    "climbed",
    "sat down",
    "rolled",
    "pivoted",
    "stepped",
    "propelled",
    "marched",
    "shuffled",
    "limped",
    "crawled",
    "hopped",
    "jogged",
    "ascended",
    "descended",
    "rose",
    "squatted",
    "knelt",
    "reached",
    "lifted",
    "carried",
    "pushed",
    "pulled",
    "turned",
    "bent",
    "balanced",
    "toileted",
    "scooted",
    "bridged",
    "negotiated",
    "traversed",
    "wheeled",
    "navigated",
    "lunged",
    "sidestepped",
    "backstepped",
    "strolled",
];

const UNITS: &[&str] = &["feet", "ft", "meters", "steps", "stairs", "yards"];

const ASSISTS: &[&str] = &[
    "with rolling walker",
    "with a cane",
    "with min assist",
    "with moderate assistance",
    "with contact guard",
    "with supervision",
    "using a walker",
    "using bilateral crutches",
    "with gait belt",
    "with assist of 2",
];

const FIXED_DISTRACTORS: &[&str] = &[
    "BP {N} / {M} , HR {N} .",
    "Follow up in {N} weeks .",
    "Labs drawn at {N} am .",
    "Skin intact , no redness noted .",
    "{S} is alert and oriented x {N} .",
    "Discussed plan of care with the team .",
    "Medications reviewed with {S} and daughter .",
];

const DISTRACTOR_VERBS: &[&str] = &[
    "reports",
    "denies",
    "stated",
    "requested",
    "tolerated",
    "voiced",
    "noted",
    "complained of",
    "described",
    "endorsed",
    "expressed",
    "declined",
    "received",
    "completed",
    "reviewed",
    "discussed",
    "understood",
    "verbalized",
    "refused",
    "was given",
    "was seen for",
    "is scheduled for",
    "was educated on",
    "agreed to",
    "asked about",
];

const DISTRACTOR_OBJECTS: &[&str] = &[
    "mild pain",
    "nausea",
    "chest pain",
    "a meal tray",
    "fall precautions",
    "discharge planning",
    "the home exercise program",
    "medication changes",
    "pain {N} / 10",
    "{N} episodes of nausea",
    "shortness of breath",
    "fatigue",
    "a follow up visit",
    "the plan of care",
    "dizziness",
    "poor sleep",
    "a flu shot",
    "blood work",
    "anxiety",
    "the session well",
    "goals for discharge",
    "a bed bath",
    "dietary education",
    "wound care",
    "the new brace",
];

const DISTRACTOR_TAILS: &[&str] = &[
    "overnight",
    "at {N} am",
    "with family",
    "today",
    "this week",
    "per nursing",
    "with daughter",
    "after lunch",
    "for {N} days",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sentences: usize,
    /// Share of sentences that contain a mobility clause.
    pub mobility_rate: f64,
    /// Zipf exponent over trigger verbs.
    pub zipf_s: f64,
    pub quantification_rate: f64,
    pub assistance_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 700,
            mobility_rate: 0.25,
            zipf_s: 0.8,
            quantification_rate: 0.6,
            assistance_rate: 0.6,
            seed: 20,
        }
    }
}

/// A generated sentence with its gold annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSentence {
    pub sentence: Sentence,
    pub gold: SentenceAnnotation,
}

#[derive(Default)]
struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    /// Appends a word (space separated) and returns its char range.
    fn push(&mut self, word: &str) -> (usize, usize) {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(word);
        self.chars += word.chars().count();
        (start, self.chars)
    }
}

fn mobility_sentence(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    verbs: &WeightedIndex<f64>,
) -> (String, Vec<EntitySpan>) {
    let mut b = Builder::default();
    let mut spans = Vec::new();
    if rng.gen_bool(0.2) {
        b.push(["Today", "Per PT", "In therapy", "This morning"].choose(rng).unwrap());
        b.push(",");
    }
    b.push(SUBJECTS.choose(rng).unwrap());
    let (mob_start, mut mob_end) = b.push(ACTIONS[verbs.sample(rng)]);
    spans.push(EntitySpan::new(mob_start, mob_end, EntityType::Action));

    let mut parts = Vec::new();
    if rng.gen_bool(cfg.quantification_rate) {
        parts.push(EntityType::Quantification);
    }
    if rng.gen_bool(cfg.assistance_rate) {
        parts.push(EntityType::Assistance);
    }
    parts.shuffle(rng);
    for p in parts {
        let range = match p {
            EntityType::Quantification => {
                let n = rng.gen_range(2..300).to_string();
                if rng.gen_bool(0.2) {
                    let (s, _) = b.push("x");
                    let (_, e) = b.push(&rng.gen_range(2..5).to_string());
                    (s, e)
                } else {
                    let (s, _) = b.push(&n);
                    let (_, e) = b.push(UNITS.choose(rng).unwrap());
                    (s, e)
                }
            }
            _ => {
                let phrase = ASSISTS.choose(rng).unwrap();
                let mut range = (usize::MAX, 0);
                for w in phrase.split(' ') {
                    let (s, e) = b.push(w);
                    range.0 = range.0.min(s);
                    range.1 = e;
                }
                range
            }
        };
        spans.push(EntitySpan::new(range.0, range.1, p));
        mob_end = range.1;
    }
    spans.push(EntitySpan::new(mob_start, mob_end, EntityType::Mobility));
    if rng.gen_bool(0.3) {
        b.push(["without loss of balance", "today", "in the hallway", "before rest"].choose(rng).unwrap());
    }
    b.push(".");
    spans.sort();
    (b.text, spans)
}

fn distractor_sentence(rng: &mut ChaCha8Rng) -> String {
    let template = if rng.gen_bool(0.2) {
        FIXED_DISTRACTORS.choose(rng).unwrap().to_string()
    } else {
        let mut t =
            format!("{{S}} {} {}", DISTRACTOR_VERBS.choose(rng).unwrap(), DISTRACTOR_OBJECTS.choose(rng).unwrap());
        if rng.gen_bool(0.5) {
            t.push(' ');
            t.push_str(DISTRACTOR_TAILS.choose(rng).unwrap());
        }
        t + " ."
    };
    let mut b = Builder::default();
    for w in template.split(' ') {
        match w {
            "{S}" => b.push(SUBJECTS.choose(rng).unwrap()),
            "{N}" => b.push(&rng.gen_range(1..200).to_string()),
            "{M}" => b.push(&rng.gen_range(40..120).to_string()),
            _ => b.push(w),
        };
    }
    b.text
}

/// Generates `cfg.sentences` distinct sentences (by sentence id) in
/// generation order.
pub fn generate_corpus(cfg: &SyntheticConfig) -> Vec<SyntheticSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = (1..=ACTIONS.len()).map(|r| 1.0 / (r as f64).powf(cfg.zipf_s)).collect();
    let verbs = WeightedIndex::new(&weights).expect("positive weights");
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.sentences);
    let mut attempts = 0;
    while out.len() < cfg.sentences && attempts < cfg.sentences * 50 {
        attempts += 1;
        let (text, spans) = if rng.gen_bool(cfg.mobility_rate) {
            mobility_sentence(&mut rng, cfg, &verbs)
        } else {
            (distractor_sentence(&mut rng), Vec::new())
        };
        let sentence = Sentence::new(text, vec![format!("synthetic-{}", cfg.seed)]);
        if !seen.insert(sentence.sentence_id.clone()) {
            continue;
        }
        let gold = SentenceAnnotation::new(sentence.sentence_id.clone(), Phase::Gold, SYNTHETIC_ANNOTATOR, spans);
        out.push(SyntheticSentence { sentence, gold });
    }
    out
}
