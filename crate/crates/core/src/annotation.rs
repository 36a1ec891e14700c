//! Nested typed spans, their per-type BIO projections, lint rules, and the
//! blind/gold adjudication bookkeeping.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SentenceId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Mobility,
    Action,
    Assistance,
    Quantification,
    ScoreDefinition,
}

impl EntityType {
    pub const ALL: [EntityType; 5] = [
        EntityType::Action,
        EntityType::Mobility,
        EntityType::Assistance,
        EntityType::Quantification,
        EntityType::ScoreDefinition,
    ];

    /// Types used for training and evaluation by default. ScoreDefinition is
    /// kept in the data model only.
    pub const IN_SCOPE: [EntityType; 4] =
        [EntityType::Action, EntityType::Mobility, EntityType::Assistance, EntityType::Quantification];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::Mobility => "Mobility",
            EntityType::Action => "Action",
            EntityType::Assistance => "Assistance",
            EntityType::Quantification => "Quantification",
            EntityType::ScoreDefinition => "ScoreDefinition",
        }
    }

    /// Column label used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            EntityType::Mobility => "Mob",
            EntityType::Action => "Act",
            EntityType::Assistance => "Ast",
            EntityType::Quantification => "Quant",
            EntityType::ScoreDefinition => "ScDf",
        }
    }

    /// Sub-entities live inside a Mobility span.
    pub fn nests_in_mobility(self) -> bool {
        self != EntityType::Mobility
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let l = s.trim().to_ascii_lowercase();
        EntityType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(&l) || t.short().eq_ignore_ascii_case(&l))
            .or(match l.as_str() {
                "score_definition" | "score-definition" => Some(EntityType::ScoreDefinition),
                _ => None,
            })
            .ok_or_else(|| format!("unknown entity type {s:?}"))
    }
}

/// Half-open character span with a type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: EntityType,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: EntityType) -> Self {
        EntitySpan { start, end, etype }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &EntitySpan) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.overlap(other) > 0
    }

    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretag,
    Blind,
    Gold,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretag => "pretag",
            Phase::Blind => "blind",
            Phase::Gold => "gold",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pretag" => Ok(Phase::Pretag),
            "blind" => Ok(Phase::Blind),
            "gold" => Ok(Phase::Gold),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

/// One annotator's spans for one sentence: the standoff JSON record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceAnnotation {
    pub sentence_id: SentenceId,
    pub phase: Phase,
    pub annotator: String,
    pub spans: Vec<EntitySpan>,
}

impl SentenceAnnotation {
    pub fn new(
        sentence_id: impl Into<String>,
        phase: Phase,
        annotator: impl Into<String>,
        spans: Vec<EntitySpan>,
    ) -> Self {
        SentenceAnnotation { sentence_id: sentence_id.into(), phase, annotator: annotator.into(), spans }
    }

    pub fn spans_of(&self, etype: EntityType) -> impl Iterator<Item = &EntitySpan> + '_ {
        self.spans.iter().filter(move |s| s.etype == etype)
    }

    /// Span set with canonical order and no duplicates.
    pub fn span_set(&self) -> BTreeSet<EntitySpan> {
        self.spans.iter().copied().collect()
    }

    /// Same spans regardless of order, annotator and phase.
    pub fn agrees_with(&self, other: &SentenceAnnotation) -> bool {
        self.sentence_id == other.sentence_id && self.span_set() == other.span_set()
    }

    /// Copy with every span snapped outward to token boundaries; spans that
    /// cover no token are dropped.
    pub fn snapped(&self, sentence: &Sentence) -> SentenceAnnotation {
        let mut out = self.clone();
        out.spans = self.spans.iter().filter_map(|s| snap_span(sentence, s)).collect();
        out.spans.sort();
        out.spans.dedup();
        out
    }
}

/// Widens a span to the boundaries of the tokens it touches.
pub fn snap_span(sentence: &Sentence, span: &EntitySpan) -> Option<EntitySpan> {
    let touched = token_range(sentence, span)?;
    Some(EntitySpan::new(sentence.tokens[touched.0].0, sentence.tokens[touched.1].1, span.etype))
}

/// First and last token index overlapping the span.
fn token_range(sentence: &Sentence, span: &EntitySpan) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, &(s, e)) in sentence.tokens.iter().enumerate() {
        if s < span.end && span.start < e {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    Some((first?, last?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }
}

/// Per-type tag sequence over `[O, B-type, I-type]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioTagSequence {
    pub etype: EntityType,
    pub tags: Vec<Tag>,
}

impl BioTagSequence {
    pub fn outside(etype: EntityType, len: usize) -> Self {
        BioTagSequence { etype, tags: vec![Tag::O; len] }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// No `I` at the start or right after `O`.
    pub fn is_valid(&self) -> bool {
        is_valid_bio(&self.tags)
    }

    pub fn label(&self, i: usize) -> String {
        tag_label(self.tags[i], self.etype)
    }
}

pub fn is_valid_bio(tags: &[Tag]) -> bool {
    let mut prev = Tag::O;
    for &t in tags {
        if t == Tag::I && prev == Tag::O {
            return false;
        }
        prev = t;
    }
    true
}

pub fn tag_label(tag: Tag, etype: EntityType) -> String {
    match tag {
        Tag::O => "O".to_string(),
        Tag::B => format!("B-{etype}"),
        Tag::I => format!("I-{etype}"),
    }
}

/// Projects the spans of one type onto the token sequence. Misaligned span
/// boundaries snap outward to the tokens they touch.
pub fn spans_to_bio(sentence: &Sentence, ann: &SentenceAnnotation, etype: EntityType) -> BioTagSequence {
    let mut tags = vec![Tag::O; sentence.tokens.len()];
    let mut spans: Vec<&EntitySpan> = ann.spans_of(etype).collect();
    spans.sort();
    for span in spans {
        if let Some((first, last)) = token_range(sentence, span) {
            tags[first] = Tag::B;
            for t in &mut tags[first + 1..=last] {
                *t = Tag::I;
            }
        }
    }
    BioTagSequence { etype, tags }
}

/// Inverse projection: maximal `B I*` runs become spans. An `I` that starts
/// a run is read as `B`; the number of such repairs is returned.
pub fn bio_to_spans_with_repairs(sentence: &Sentence, bio: &BioTagSequence) -> (Vec<EntitySpan>, usize) {
    let mut spans = Vec::new();
    let mut repairs = 0;
    let mut open: Option<(usize, usize)> = None;
    let mut prev = Tag::O;
    for (i, &tag) in bio.tags.iter().enumerate().take(sentence.tokens.len()) {
        let starts = match tag {
            Tag::O => false,
            Tag::B => true,
            Tag::I if prev == Tag::O => {
                repairs += 1;
                true
            }
            Tag::I => false,
        };
        if tag == Tag::O || starts {
            if let Some((a, b)) = open.take() {
                spans.push(EntitySpan::new(sentence.tokens[a].0, sentence.tokens[b].1, bio.etype));
            }
        }
        if starts {
            open = Some((i, i));
        } else if tag == Tag::I {
            if let Some(run) = open.as_mut() {
                run.1 = i;
            }
        }
        prev = tag;
    }
    if let Some((a, b)) = open {
        spans.push(EntitySpan::new(sentence.tokens[a].0, sentence.tokens[b].1, bio.etype));
    }
    (spans, repairs)
}

pub fn bio_to_spans(sentence: &Sentence, bio: &BioTagSequence) -> Vec<EntitySpan> {
    let (spans, repairs) = bio_to_spans_with_repairs(sentence, bio);
    if repairs > 0 {
        log::warn!(
            "repaired {repairs} invalid BIO transition(s) for {} in sentence {}",
            bio.etype,
            sentence.sentence_id
        );
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingKind {
    /// Sub-entity outside every Mobility span.
    Nesting,
    /// Neither an Action nor a Mobility span.
    EmptyRelevant,
    /// Two spans of the same type overlap.
    OverlapSameType,
    /// Span boundary off the token grid, or outside the text.
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub severity: Severity,
    /// Index into the annotation's span list, when the finding is about one span.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub span: Option<usize>,
    pub message: String,
}

impl Finding {
    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// Lints an annotation. Same-type overlap and spans that fall outside the
/// text (or cover no token) are errors; everything else is a warning.
pub fn validate_annotation(sentence: &Sentence, ann: &SentenceAnnotation) -> Vec<Finding> {
    let mut findings = Vec::new();
    let len = sentence.char_len();
    let starts: BTreeSet<usize> = sentence.tokens.iter().map(|t| t.0).collect();
    let ends: BTreeSet<usize> = sentence.tokens.iter().map(|t| t.1).collect();

    for (i, span) in ann.spans.iter().enumerate() {
        if span.start >= span.end || span.end > len {
            findings.push(Finding {
                kind: FindingKind::Offset,
                severity: Severity::Error,
                span: Some(i),
                message: format!("span {}..{} outside sentence of length {len}", span.start, span.end),
            });
        } else if token_range(sentence, span).is_none() {
            findings.push(Finding {
                kind: FindingKind::Offset,
                severity: Severity::Error,
                span: Some(i),
                message: format!("span {}..{} covers no token", span.start, span.end),
            });
        } else if !starts.contains(&span.start) || !ends.contains(&span.end) {
            findings.push(Finding {
                kind: FindingKind::Offset,
                severity: Severity::Warning,
                span: Some(i),
                message: format!("span {}..{} is not token-aligned", span.start, span.end),
            });
        }
    }

    for (i, a) in ann.spans.iter().enumerate() {
        for (j, b) in ann.spans.iter().enumerate().skip(i + 1) {
            if a.etype == b.etype && a.overlaps(b) {
                findings.push(Finding {
                    kind: FindingKind::OverlapSameType,
                    severity: Severity::Error,
                    span: Some(j),
                    message: format!("{} spans {}..{} and {}..{} overlap", a.etype, a.start, a.end, b.start, b.end),
                });
            }
        }
    }

    let mobility: Vec<&EntitySpan> = ann.spans_of(EntityType::Mobility).collect();
    for (i, span) in ann.spans.iter().enumerate() {
        if span.etype.nests_in_mobility() && !mobility.iter().any(|m| m.contains(span)) {
            findings.push(Finding {
                kind: FindingKind::Nesting,
                severity: Severity::Warning,
                span: Some(i),
                message: format!("{} span {}..{} is not inside a Mobility span", span.etype, span.start, span.end),
            });
        }
    }

    if !ann.spans.iter().any(|s| matches!(s.etype, EntityType::Action | EntityType::Mobility)) {
        findings.push(Finding {
            kind: FindingKind::EmptyRelevant,
            severity: Severity::Warning,
            span: None,
            message: "no Action or Mobility span".into(),
        });
    }
    findings
}

pub fn has_hard_error(findings: &[Finding]) -> bool {
    findings.iter().any(Finding::is_error)
}

/// A span on which the two blind passes and the gold record do not all agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanDiff {
    pub span: EntitySpan,
    pub in_a: bool,
    pub in_b: bool,
    pub in_gold: bool,
}

impl SpanDiff {
    /// Short label such as `b-miss` (gold kept a span B did not mark) or
    /// `a-extra` (A marked a span gold dropped).
    pub fn label(&self) -> String {
        let side = |present: bool, name: &str| match (present, self.in_gold) {
            (false, true) => Some(format!("{name}-miss")),
            (true, false) => Some(format!("{name}-extra")),
            _ => None,
        };
        [side(self.in_a, "a"), side(self.in_b, "b")].into_iter().flatten().collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjudication {
    pub gold: SentenceAnnotation,
    pub diff: Vec<SpanDiff>,
}

/// Turns an adjudicator's resolution into the gold record and logs how the
/// two blind passes differed from it.
pub fn adjudicate(
    sentence: &Sentence,
    blind_a: &SentenceAnnotation,
    blind_b: &SentenceAnnotation,
    resolution: &SentenceAnnotation,
) -> Result<Adjudication> {
    let id = &sentence.sentence_id;
    if &blind_a.sentence_id != id || &blind_b.sentence_id != id || &resolution.sentence_id != id {
        return Err(Error::SentenceMismatch);
    }
    let findings = validate_annotation(sentence, resolution);
    if let Some(f) = findings.iter().find(|f| f.is_error()) {
        return Err(Error::AnnotationRejected { sentence_id: id.clone(), reason: f.message.clone() });
    }
    let (a, b, g) = (blind_a.span_set(), blind_b.span_set(), resolution.span_set());
    let all: BTreeSet<EntitySpan> = a.iter().chain(&b).chain(&g).copied().collect();
    let diff = all
        .into_iter()
        .map(|span| SpanDiff { span, in_a: a.contains(&span), in_b: b.contains(&span), in_gold: g.contains(&span) })
        .filter(|d| !(d.in_a && d.in_b && d.in_gold))
        .collect();
    let mut gold = resolution.clone();
    gold.phase = Phase::Gold;
    Ok(Adjudication { gold, diff })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Batch size and how many of each batch go to validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizing {
    pub size: usize,
    pub validation: usize,
}

impl Default for BatchSizing {
    fn default() -> Self {
        BatchSizing { size: 125, validation: 25 }
    }
}

impl BatchSizing {
    /// Validation count for a batch of `n` sentences, keeping the ratio.
    pub fn validation_for(&self, n: usize) -> usize {
        if self.size == 0 {
            return 0;
        }
        ((n * self.validation + self.size / 2) / self.size).min(n)
    }
}

/// A set of sentences handed to annotators in one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBatch {
    pub iteration: u32,
    pub sentence_ids: Vec<SentenceId>,
    pub split_hint: Vec<Split>,
}

impl AnnotationBatch {
    /// Validation slots are spread evenly over the ranked order, so both
    /// splits see the same mix of scores.
    pub fn new(iteration: u32, sentence_ids: Vec<SentenceId>, sizing: BatchSizing) -> Self {
        let n = sentence_ids.len();
        let v = sizing.validation_for(n);
        let split_hint = (0..n)
            .map(|i| if n > 0 && (i + 1) * v / n > i * v / n { Split::Validation } else { Split::Train })
            .collect();
        AnnotationBatch { iteration, sentence_ids, split_hint }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.sentence_ids.iter().position(|s| s == id).map(|i| self.split_hint[i])
    }

    pub fn len(&self) -> usize {
        self.sentence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_ids.is_empty()
    }
}

/// CoNLL-style block: a `# sentence_id` comment, one token per line with one
/// tag column per type, and a terminating blank line.
pub fn to_conll(sentence: &Sentence, ann: &SentenceAnnotation, etypes: &[EntityType]) -> String {
    let projections: Vec<BioTagSequence> = etypes.iter().map(|&t| spans_to_bio(sentence, ann, t)).collect();
    let mut out = format!("# sentence_id = {}\n", sentence.sentence_id);
    for (i, tok) in sentence.token_strs().into_iter().enumerate() {
        out.push_str(tok);
        for p in &projections {
            out.push('\t');
            out.push_str(&p.label(i));
        }
        out.push('\n');
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EntityType::*;

    fn sent(text: &str) -> Sentence {
        Sentence::new(text, Vec::<String>::new())
    }

    fn ann(spans: Vec<EntitySpan>) -> SentenceAnnotation {
        SentenceAnnotation::new("x", Phase::Blind, "a", spans)
    }

    /// "Pt ambulated 50 feet with rolling walker" with Mobility over the
    /// clause and Action/Quantification/Assistance nested inside.
    fn nested_fixture() -> (Sentence, SentenceAnnotation) {
        let s = sent("Pt ambulated 50 feet with rolling walker");
        let mut a = ann(vec![
            EntitySpan::new(3, 40, Mobility),
            EntitySpan::new(3, 12, Action),
            EntitySpan::new(13, 20, Quantification),
            EntitySpan::new(26, 40, Assistance),
        ]);
        a.sentence_id = s.sentence_id.clone();
        (s, a)
    }

    #[test]
    fn single_and_full_cover_projection() {
        let s = sent("Pt ambulates independently");
        let a = ann(vec![EntitySpan::new(3, 12, Action)]);
        assert_eq!(spans_to_bio(&s, &a, Action).tags, vec![Tag::O, Tag::B, Tag::O]);
        let m = ann(vec![EntitySpan::new(0, 26, Mobility)]);
        assert_eq!(spans_to_bio(&s, &m, Mobility).tags, vec![Tag::B, Tag::I, Tag::I]);
    }

    #[test]
    fn nested_round_trip() {
        let (s, a) = nested_fixture();
        for t in [Mobility, Action, Assistance, Quantification] {
            let bio = spans_to_bio(&s, &a, t);
            assert!(bio.is_valid());
            let back = bio_to_spans(&s, &bio);
            let orig: Vec<EntitySpan> = a.spans_of(t).copied().collect();
            assert_eq!(back, orig, "{t}");
        }
        assert_eq!(spans_to_bio(&s, &a, Mobility).tags, vec![Tag::O, Tag::B, Tag::I, Tag::I, Tag::I, Tag::I, Tag::I]);
    }

    #[test]
    fn inverse_projection_rules() {
        let s = sent("a b c");
        let bio = |tags: Vec<Tag>| BioTagSequence { etype: Action, tags };
        assert_eq!(bio_to_spans(&s, &bio(vec![Tag::O, Tag::B, Tag::O])), vec![EntitySpan::new(2, 3, Action)]);
        assert_eq!(
            bio_to_spans(&s, &bio(vec![Tag::B, Tag::I, Tag::B])),
            vec![EntitySpan::new(0, 3, Action), EntitySpan::new(4, 5, Action)]
        );
        let (spans, repairs) = bio_to_spans_with_repairs(&s, &bio(vec![Tag::O, Tag::I, Tag::O]));
        assert_eq!(spans, vec![EntitySpan::new(2, 3, Action)]);
        assert_eq!(repairs, 1);
    }

    #[test]
    fn snapping_widens_to_tokens() {
        let s = sent("Pt ambulates independently");
        let a = ann(vec![EntitySpan::new(5, 9, Action)]);
        assert_eq!(spans_to_bio(&s, &a, Action).tags, vec![Tag::O, Tag::B, Tag::O]);
        assert_eq!(a.snapped(&s).spans, vec![EntitySpan::new(3, 12, Action)]);
    }

    #[test]
    fn lint_rules() {
        let (s, a) = nested_fixture();
        assert!(validate_annotation(&s, &a).is_empty());

        let stray = ann(vec![EntitySpan::new(0, 12, Mobility), EntitySpan::new(26, 40, Assistance)]);
        let f = validate_annotation(&s, &stray);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::Nesting);
        assert_eq!(f[0].severity, Severity::Warning);

        let overlap =
            ann(vec![EntitySpan::new(0, 40, Mobility), EntitySpan::new(3, 12, Action), EntitySpan::new(3, 20, Action)]);
        let f = validate_annotation(&s, &overlap);
        assert!(f.iter().any(|f| f.kind == FindingKind::OverlapSameType && f.is_error()));

        let empty = ann(vec![]);
        assert_eq!(validate_annotation(&s, &empty)[0].kind, FindingKind::EmptyRelevant);

        let bad = ann(vec![EntitySpan::new(30, 99, Action), EntitySpan::new(5, 9, Mobility)]);
        let f = validate_annotation(&s, &bad);
        assert!(f.iter().any(|f| f.kind == FindingKind::Offset && f.is_error()));
        assert!(f.iter().any(|f| f.kind == FindingKind::Offset && !f.is_error()));
    }

    #[test]
    fn adjudication_diffs() {
        let (s, gold) = nested_fixture();
        let a = gold.clone();
        let adj = adjudicate(&s, &a, &a, &a).unwrap();
        assert!(adj.diff.is_empty());
        assert_eq!(adj.gold.phase, Phase::Gold);

        let mut b = gold.clone();
        b.spans.retain(|sp| sp.etype != Quantification);
        let adj = adjudicate(&s, &a, &b, &gold).unwrap();
        assert_eq!(adj.diff.len(), 1);
        assert_eq!(adj.diff[0].span.etype, Quantification);
        assert_eq!(adj.diff[0].label(), "b-miss");

        let mut bad = gold.clone();
        bad.spans.push(EntitySpan::new(3, 20, Action));
        assert!(matches!(adjudicate(&s, &a, &b, &bad), Err(Error::AnnotationRejected { .. })));

        let mut other = gold.clone();
        other.sentence_id = "zzz".into();
        assert!(matches!(adjudicate(&s, &a, &other, &gold), Err(Error::SentenceMismatch)));
    }

    #[test]
    fn batch_split_hints() {
        let ids: Vec<String> = (0..125).map(|i| format!("{i:03}")).collect();
        let b = AnnotationBatch::new(1, ids, BatchSizing::default());
        let v = b.split_hint.iter().filter(|s| **s == Split::Validation).count();
        assert_eq!(v, 25);
        assert_eq!(b.split_hint[4], Split::Validation);
        assert_eq!(b.split_hint[0], Split::Train);

        let seed = AnnotationBatch::new(0, (0..20).map(|i| i.to_string()).collect(), BatchSizing::default());
        assert_eq!(seed.split_hint.iter().filter(|s| **s == Split::Validation).count(), 4);
    }

    #[test]
    fn standoff_layout() {
        let a = SentenceAnnotation::new("abc", Phase::Gold, "ann1", vec![EntitySpan::new(0, 2, Action)]);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            r#"{"sentence_id":"abc","phase":"gold","annotator":"ann1","spans":[{"start":0,"end":2,"type":"Action"}]}"#
        );
    }

    #[test]
    fn conll_block() {
        let (s, a) = nested_fixture();
        let out = to_conll(&s, &a, &[Action, Mobility]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], format!("# sentence_id = {}", s.sentence_id));
        assert_eq!(lines[1], "Pt\tO\tO");
        assert_eq!(lines[2], "ambulated\tB-Action\tB-Mobility");
        assert_eq!(lines[3], "50\tO\tI-Mobility");
        assert!(out.ends_with("\n\n"));
    }

    #[test]
    fn entity_type_parsing() {
        assert_eq!("action".parse::<EntityType>().unwrap(), Action);
        assert_eq!("Quant".parse::<EntityType>().unwrap(), Quantification);
        assert!("Foo".parse::<EntityType>().is_err());
    }

    fn arb_bio() -> impl Strategy<Value = Vec<Tag>> {
        proptest::collection::vec(0usize..3, 1..12).prop_map(|v| {
            let mut tags: Vec<Tag> = v.into_iter().map(Tag::from_index).collect();
            for i in 0..tags.len() {
                if tags[i] == Tag::I && (i == 0 || tags[i - 1] == Tag::O) {
                    tags[i] = Tag::B;
                }
            }
            tags
        })
    }

    proptest! {
        #[test]
        fn bio_round_trip(tags in arb_bio()) {
            let text = (0..tags.len()).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            let s = sent(&text);
            let bio = BioTagSequence { etype: Action, tags };
            let spans = bio_to_spans(&s, &bio);
            let a = ann(spans.clone());
            prop_assert_eq!(spans_to_bio(&s, &a, Action), bio);
        }

        #[test]
        fn projections_are_independent(tags in arb_bio(), extra in arb_bio()) {
            let n = tags.len().max(extra.len());
            let text = (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            let s = sent(&text);
            let mob = bio_to_spans(&s, &BioTagSequence { etype: Mobility, tags });
            let act = bio_to_spans(&s, &BioTagSequence { etype: Action, tags: extra });
            let base = ann(mob.clone());
            let mut edited = ann(mob);
            edited.spans.extend(act);
            prop_assert_eq!(spans_to_bio(&s, &base, Mobility), spans_to_bio(&s, &edited, Mobility));
        }
    }
}
