//! Span-level scoring, inter-annotator agreement, balanced k-fold splits and
//! the cross-validation harness.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{bio_to_spans, EntitySpan, EntityType, SentenceAnnotation};
use crate::corpus::{Sentence, SentenceId};
use crate::error::{Error, Result};
use crate::taggers::{train_on_annotations, TaggerKind, TaggerModel, TrainConfig};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_FOLD_SEED: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Partial,
}

impl MatchMode {
    pub const BOTH: [MatchMode; 2] = [MatchMode::Exact, MatchMode::Partial];

    pub fn short(self) -> &'static str {
        match self {
            MatchMode::Exact => "E",
            MatchMode::Partial => "P",
        }
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exact" | "e" => Ok(MatchMode::Exact),
            "partial" | "p" => Ok(MatchMode::Partial),
            _ => Err(format!("unknown match mode {s:?}")),
        }
    }
}

/// Precision, recall and F1 with the counts they came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfScore {
    /// Scores from counts. With no gold and no predicted spans at all the
    /// two sides agree trivially and every score is 1; otherwise an empty
    /// denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return PrfScore { precision: 1.0, recall: 1.0, f1: 1.0, tp, fp, fn_ };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        PrfScore { precision, recall, f1, tp, fp, fn_ }
    }

    /// Pools the counts of two scores.
    pub fn merge(&self, other: &PrfScore) -> PrfScore {
        PrfScore::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

impl Default for PrfScore {
    fn default() -> Self {
        PrfScore::from_counts(0, 0, 0)
    }
}

fn bounds(s: &EntitySpan) -> (usize, usize) {
    (s.start, s.end)
}

/// Number of one-to-one matches between gold and predicted spans (already
/// filtered to one type).
fn matched(gold: &[(usize, usize)], pred: &[(usize, usize)], mode: MatchMode) -> usize {
    match mode {
        MatchMode::Exact => {
            let mut counts: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
            for g in gold {
                counts.entry(*g).or_default().0 += 1;
            }
            for p in pred {
                counts.entry(*p).or_default().1 += 1;
            }
            counts.values().map(|(g, p)| g.min(p)).sum()
        }
        MatchMode::Partial => {
            let overlap = |a: (usize, usize), b: (usize, usize)| a.1.min(b.1).saturating_sub(a.0.max(b.0));
            let mut pairs = Vec::new();
            for (gi, &g) in gold.iter().enumerate() {
                for (pi, &p) in pred.iter().enumerate() {
                    let o = overlap(g, p);
                    if o > 0 {
                        // the key depends on the unordered pair only, so
                        // swapping gold and pred gives the same matching size
                        pairs.push(((Reverse(o), g != p, g.min(p), g.max(p)), gi, pi));
                    }
                }
            }
            pairs.sort();
            let mut used_g = vec![false; gold.len()];
            let mut used_p = vec![false; pred.len()];
            let mut n = 0;
            for (_, gi, pi) in pairs {
                if !used_g[gi] && !used_p[pi] {
                    used_g[gi] = true;
                    used_p[pi] = true;
                    n += 1;
                }
            }
            n
        }
    }
}

fn counts(gold: &[EntitySpan], pred: &[EntitySpan], etype: EntityType, mode: MatchMode) -> (usize, usize, usize) {
    let g: Vec<_> = gold.iter().filter(|s| s.etype == etype).map(bounds).collect();
    let p: Vec<_> = pred.iter().filter(|s| s.etype == etype).map(bounds).collect();
    let tp = matched(&g, &p, mode);
    (tp, p.len() - tp, g.len() - tp)
}

/// Span F1 for one entity type. Exact matching needs identical boundaries;
/// partial matching pairs spans greedily by overlap length, one to one.
pub fn span_f1(gold: &[EntitySpan], pred: &[EntitySpan], etype: EntityType, mode: MatchMode) -> PrfScore {
    let (tp, fp, fn_) = counts(gold, pred, etype, mode);
    PrfScore::from_counts(tp, fp, fn_)
}

/// Micro-averaged span F1 over aligned (gold, predicted) sentence pairs.
pub fn micro_span_f1<'a>(
    pairs: impl IntoIterator<Item = (&'a [EntitySpan], &'a [EntitySpan])>,
    etype: EntityType,
    mode: MatchMode,
) -> PrfScore {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in pairs {
        let c = counts(g, p, etype, mode);
        tp += c.0;
        fp += c.1;
        fn_ += c.2;
    }
    PrfScore::from_counts(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgreementPair {
    #[serde(rename = "A vs B")]
    AB,
    #[serde(rename = "A vs Gold")]
    AGold,
    #[serde(rename = "B vs Gold")]
    BGold,
}

impl AgreementPair {
    pub const ALL: [AgreementPair; 3] = [AgreementPair::AB, AgreementPair::AGold, AgreementPair::BGold];

    pub fn label(self) -> &'static str {
        match self {
            AgreementPair::AB => "A vs B",
            AgreementPair::AGold => "A vs Gold",
            AgreementPair::BGold => "B vs Gold",
        }
    }
}

impl fmt::Display for AgreementPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub pair: AgreementPair,
    pub etype: EntityType,
    pub mode: MatchMode,
    pub score: PrfScore,
}

/// Agreement scores for every (pair, type, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaaReport {
    pub sentences: usize,
    pub etypes: Vec<EntityType>,
    pub cells: Vec<AgreementCell>,
}

impl IaaReport {
    pub fn get(&self, pair: AgreementPair, etype: EntityType, mode: MatchMode) -> Option<&PrfScore> {
        self.cells.iter().find(|c| c.pair == pair && c.etype == etype && c.mode == mode).map(|c| &c.score)
    }

    /// One row per pair, an exact and a partial F1 column per type.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair");
        for t in &self.etypes {
            for m in MatchMode::BOTH {
                out.push_str(&format!(",{} {}", t.short(), m.short()));
            }
        }
        out.push('\n');
        for pair in AgreementPair::ALL {
            out.push_str(pair.label());
            for &t in &self.etypes {
                for m in MatchMode::BOTH {
                    let f1 = self.get(pair, t, m).map_or(0.0, |s| s.f1);
                    out.push_str(&format!(",{f1:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn by_sentence(anns: &[SentenceAnnotation]) -> BTreeMap<&str, &SentenceAnnotation> {
    anns.iter().map(|a| (a.sentence_id.as_str(), a)).collect()
}

/// Agreement between two blind annotation sets and the gold set. All three
/// must cover the same sentences; scores are micro-averaged across them.
pub fn iaa_report(
    blind_a: &[SentenceAnnotation],
    blind_b: &[SentenceAnnotation],
    gold: &[SentenceAnnotation],
    etypes: &[EntityType],
) -> Result<IaaReport> {
    let (a, b, g) = (by_sentence(blind_a), by_sentence(blind_b), by_sentence(gold));
    let ka: BTreeSet<&str> = a.keys().copied().collect();
    let kb: BTreeSet<&str> = b.keys().copied().collect();
    let kg: BTreeSet<&str> = g.keys().copied().collect();
    if ka != kb || ka != kg {
        let all: BTreeSet<&str> = ka.union(&kb).chain(kg.iter()).copied().collect();
        let missing = all
            .into_iter()
            .filter(|id| !(ka.contains(id) && kb.contains(id) && kg.contains(id)))
            .map(str::to_string)
            .collect();
        return Err(Error::CoverageMismatch(missing));
    }
    let mut cells = Vec::new();
    for pair in AgreementPair::ALL {
        let (x, y) = match pair {
            AgreementPair::AB => (&a, &b),
            AgreementPair::AGold => (&a, &g),
            AgreementPair::BGold => (&b, &g),
        };
        for &etype in etypes {
            for mode in MatchMode::BOTH {
                // the second member plays the reference role
                let score =
                    micro_span_f1(ka.iter().map(|id| (y[id].spans.as_slice(), x[id].spans.as_slice())), etype, mode);
                cells.push(AgreementCell { pair, etype, mode, score });
            }
        }
    }
    Ok(IaaReport { sentences: ka.len(), etypes: etypes.to_vec(), cells })
}

/// Sentence ids split into k folds, with per-fold counts of sentences
/// bearing each entity type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<SentenceId>>,
    pub counts: Vec<BTreeMap<EntityType, usize>>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|s| s == id))
    }

    /// Largest minus smallest per-fold count for a type.
    pub fn spread(&self, etype: EntityType) -> usize {
        let c: Vec<usize> = self.counts.iter().map(|m| m.get(&etype).copied().unwrap_or(0)).collect();
        c.iter().max().unwrap_or(&0) - c.iter().min().unwrap_or(&0)
    }
}

const TYPE_WEIGHT: i64 = 1 << 20;

struct FoldState {
    loads: Vec<Vec<i64>>,
    sizes: Vec<i64>,
}

impl FoldState {
    /// Change in the sum of squared loads when `types` leaves fold `from`
    /// and enters fold `to`. Type loads dominate; fold sizes break ties.
    fn move_delta(&self, types: &[usize], from: usize, to: usize) -> i64 {
        let mut d = 2 * (self.sizes[to] - self.sizes[from] + 1);
        for &t in types {
            d += TYPE_WEIGHT * 2 * (self.loads[to][t] - self.loads[from][t] + 1);
        }
        d
    }

    fn apply(&mut self, types: &[usize], from: usize, to: usize) {
        self.sizes[from] -= 1;
        self.sizes[to] += 1;
        for &t in types {
            self.loads[from][t] -= 1;
            self.loads[to][t] += 1;
        }
    }
}

/// Greedy assignment in the given order followed by local search: the first
/// improving move or swap is taken until none is left.
fn balance_once(types: &[Vec<usize>], order: &[usize], k: usize, nt: usize) -> (Vec<usize>, FoldState) {
    let mut st = FoldState { loads: vec![vec![0; nt]; k], sizes: vec![0; k] };
    let mut fold_of = vec![0usize; types.len()];
    for &i in order {
        let ts = &types[i];
        let f = (0..k)
            .min_by_key(|&f| {
                let max = ts.iter().map(|&t| st.loads[f][t]).max().unwrap_or(0);
                let sum: i64 = ts.iter().map(|&t| st.loads[f][t]).sum();
                (max, sum, st.sizes[f], f)
            })
            .unwrap();
        fold_of[i] = f;
        st.sizes[f] += 1;
        for &t in ts {
            st.loads[f][t] += 1;
        }
    }

    let only = |x: &[usize], y: &[usize]| -> Vec<usize> { x.iter().copied().filter(|t| !y.contains(t)).collect() };
    let mut improved = true;
    let mut rounds = 0;
    while improved && rounds < 100 {
        improved = false;
        rounds += 1;
        for &i in order {
            let from = fold_of[i];
            for to in 0..k {
                if to != from && st.move_delta(&types[i], from, to) < 0 {
                    st.apply(&types[i], from, to);
                    fold_of[i] = to;
                    improved = true;
                    break;
                }
            }
        }
        for (a_pos, &a) in order.iter().enumerate() {
            for &b in &order[a_pos + 1..] {
                let (fa, fb) = (fold_of[a], fold_of[b]);
                if fa == fb || types[a] == types[b] {
                    continue;
                }
                let ta = only(&types[a], &types[b]);
                let tb = only(&types[b], &types[a]);
                // a swap leaves fold sizes alone
                let mut d = 0;
                for &t in &ta {
                    d += 2 * (st.loads[fb][t] - st.loads[fa][t] + 1);
                }
                for &t in &tb {
                    d += 2 * (st.loads[fa][t] - st.loads[fb][t] + 1);
                }
                if d < 0 {
                    st.apply(&ta, fa, fb);
                    st.apply(&tb, fb, fa);
                    fold_of[a] = fb;
                    fold_of[b] = fa;
                    improved = true;
                }
            }
        }
    }
    (fold_of, st)
}

/// How far per-type loads stray outside `[floor(total/k), ceil(total/k)]`,
/// then the sum of squared loads.
fn imbalance(st: &FoldState, totals: &[usize], k: usize) -> (i64, i64) {
    let mut outside = 0;
    let mut squares = 0;
    for (t, &total) in totals.iter().enumerate() {
        let lo = (total / k) as i64;
        let hi = total.div_ceil(k) as i64;
        for f in 0..k {
            let l = st.loads[f][t];
            outside += (l - hi).max(0) + (lo - l).max(0);
            squares += l * l;
        }
    }
    (outside, squares)
}

const MAX_ATTEMPTS: usize = 64;

/// Balanced k-fold split. Sentences are shuffled by `seed`, ordered so that
/// those carrying the rarest types come first, and each goes to the fold
/// least loaded on its own types. A local search then moves or swaps single
/// sentences while that lowers the squared per-type loads. If some type is
/// still spread by more than one, the whole procedure is retried on fresh
/// shuffles and the most balanced result is kept.
pub fn stratified_kfold(dataset: &[SentenceAnnotation], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = dataset.len();
    if k < 2 || k > n {
        return Err(Error::InvalidFolds { k, n });
    }
    let nt = EntityType::ALL.len();
    let type_ix = |t: EntityType| EntityType::ALL.iter().position(|&x| x == t).unwrap();
    let types: Vec<Vec<usize>> = dataset
        .iter()
        .map(|a| {
            let s: BTreeSet<usize> = a.spans.iter().map(|s| type_ix(s.etype)).collect();
            s.into_iter().collect()
        })
        .collect();
    let mut totals = vec![0usize; nt];
    for ts in &types {
        for &t in ts {
            totals[t] += 1;
        }
    }
    let rarity = |i: usize| types[i].iter().map(|&t| totals[t]).min().unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<((i64, i64), Vec<usize>, FoldState)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| rarity(i));
        let (fold_of, st) = balance_once(&types, &order, k, nt);
        let score = imbalance(&st, &totals, k);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, fold_of, st));
        }
        if score.0 == 0 {
            break;
        }
    }
    let (_, fold_of, st) = best.expect("at least one attempt");

    let mut folds = vec![Vec::new(); k];
    let mut counts = vec![BTreeMap::new(); k];
    for (i, ann) in dataset.iter().enumerate() {
        folds[fold_of[i]].push(ann.sentence_id.clone());
    }
    for (f, c) in counts.iter_mut().enumerate() {
        for t in EntityType::ALL {
            if totals[type_ix(t)] > 0 {
                c.insert(t, st.loads[f][type_ix(t)] as usize);
            }
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldAssignment { folds, counts })
}

/// Gold spans snapped to token boundaries, so they are comparable with
/// decoded predictions.
fn reference_spans(sentence: &Sentence, ann: &SentenceAnnotation, etype: EntityType) -> Vec<EntitySpan> {
    ann.snapped(sentence).spans.into_iter().filter(|s| s.etype == etype).collect()
}

/// Exact span score of a trained model on annotated sentences.
pub fn evaluate_model(model: &TaggerModel, data: &[(&Sentence, &SentenceAnnotation)]) -> PrfScore {
    let parts: Vec<(Vec<EntitySpan>, Vec<EntitySpan>)> = data
        .par_iter()
        .map(|(s, ann)| {
            let pred = bio_to_spans(s, &model.decode(s));
            (reference_spans(s, ann, model.etype), pred)
        })
        .collect();
    micro_span_f1(parts.iter().map(|(g, p)| (g.as_slice(), p.as_slice())), model.etype, MatchMode::Exact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub scores: BTreeMap<EntityType, PrfScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub kind: TaggerKind,
    pub k: usize,
    pub folds: Vec<FoldScores>,
    pub mean: BTreeMap<EntityType, MeanScore>,
}

impl CrossValidation {
    /// One row per tagger, mean exact F1 per type.
    pub fn to_csv(&self) -> String {
        let types: Vec<EntityType> = self.mean.keys().copied().collect();
        let mut out = String::from("model");
        for t in &types {
            out.push_str(&format!(",{}", t.short()));
        }
        out.push('\n');
        out.push_str(&self.kind.to_string());
        for t in &types {
            out.push_str(&format!(",{:.4}", self.mean[t].f1));
        }
        out.push('\n');
        out
    }
}

/// Trains on k-1 folds and scores the held-out fold, for every fold and
/// type; folds run in parallel. The reported mean is the average of the
/// per-fold scores.
pub fn cross_validate(
    dataset: &[(&Sentence, &SentenceAnnotation)],
    kind: TaggerKind,
    k: usize,
    seed: u64,
    config: &TrainConfig,
    etypes: &[EntityType],
) -> Result<CrossValidation> {
    let anns: Vec<SentenceAnnotation> = dataset.iter().map(|(_, a)| (*a).clone()).collect();
    let assignment = stratified_kfold(&anns, k, seed)?;
    let fold_ix: BTreeMap<&str, usize> =
        assignment.folds.iter().enumerate().flat_map(|(f, ids)| ids.iter().map(move |id| (id.as_str(), f))).collect();
    let folds: Vec<FoldScores> = (0..k)
        .into_par_iter()
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) =
                dataset.iter().copied().partition(|(s, _)| fold_ix[s.sentence_id.as_str()] == f);
            let mut scores = BTreeMap::new();
            for &etype in etypes {
                let model = train_on_annotations(kind, etype, &train, &[], config)?;
                scores.insert(etype, evaluate_model(&model, &test));
            }
            Ok(FoldScores { fold: f, scores })
        })
        .collect::<Result<_>>()?;
    let mut mean = BTreeMap::new();
    for &etype in etypes {
        let n = folds.len() as f64;
        let avg = |g: fn(&PrfScore) -> f64| folds.iter().map(|fs| g(&fs.scores[&etype])).sum::<f64>() / n;
        mean.insert(etype, MeanScore { precision: avg(|s| s.precision), recall: avg(|s| s.recall), f1: avg(|s| s.f1) });
    }
    Ok(CrossValidation { kind, k, folds, mean })
}

/// Entity mention counts per type over a set of annotations, laid out as a
/// dataset summary row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub sentences: usize,
    pub mentions: BTreeMap<EntityType, usize>,
    pub total: usize,
}

impl EntityCounts {
    pub fn from_annotations(anns: &[SentenceAnnotation]) -> Self {
        let mut mentions: BTreeMap<EntityType, usize> = EntityType::ALL.iter().map(|&t| (t, 0)).collect();
        for a in anns {
            for s in &a.spans {
                *mentions.entry(s.etype).or_default() += 1;
            }
        }
        EntityCounts { sentences: anns.len(), total: mentions.values().sum(), mentions }
    }

    pub fn get(&self, etype: EntityType) -> usize {
        self.mentions.get(&etype).copied().unwrap_or(0)
    }

    /// `Dataset | Sentences | Act | Mob | Ast | Quant | ScDf | Total`, one row.
    pub fn to_table(&self, dataset: &str) -> String {
        let mut head = String::from("Dataset | Sentences");
        let mut row = format!("{dataset} | {}", self.sentences);
        for t in EntityType::ALL {
            head.push_str(&format!(" | {}", t.short()));
            row.push_str(&format!(" | {}", self.get(t)));
        }
        format!("{head} | Total\n{row} | {}\n", self.total)
    }
}
