//! The annotation loop as seen by annotators and adjudicators: fetch the
//! open batch, submit blind passes, resolve them to gold, close the
//! iteration. Order is enforced here; the HTTP service is a thin wrapper.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::active_learning::IterationRecord;
use crate::annotation::{
    adjudicate, validate_annotation, EntitySpan, EntityType, Finding, Phase, SentenceAnnotation, SpanDiff, Split,
};
use crate::corpus::{Sentence, SentenceId};
use crate::error::{Error, Result};
use crate::evaluation::EntityCounts;
use crate::project::{Project, RecordFindings, Rejection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Annotator,
    Adjudicator,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "annotator" => Ok(Role::Annotator),
            "adjudicator" => Ok(Role::Adjudicator),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Annotator => "annotator",
            Role::Adjudicator => "adjudicator",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSession {
    pub annotator_id: String,
    pub role: Role,
}

impl ApiSession {
    pub fn new(annotator_id: impl Into<String>, role: Role) -> Result<Self> {
        let annotator_id = annotator_id.into();
        if annotator_id.trim().is_empty() {
            return Err(Error::Workflow("annotator_id must not be empty".into()));
        }
        Ok(ApiSession { annotator_id, role })
    }

    pub fn annotator(id: &str) -> Result<Self> {
        ApiSession::new(id, Role::Annotator)
    }

    pub fn adjudicator(id: &str) -> Result<Self> {
        ApiSession::new(id, Role::Adjudicator)
    }
}

/// One sentence of the open batch. Annotators see the pre-tagging and their
/// own submission; adjudicators also see every blind pass and the proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub sentence_id: SentenceId,
    pub text: String,
    pub tokens: Vec<(usize, usize)>,
    pub split: Split,
    pub pretag: Vec<EntitySpan>,
    /// Lints of the pre-tagging.
    pub lints: Vec<Finding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub own: Option<Vec<EntitySpan>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blind: Option<BTreeMap<String, Vec<EntitySpan>>>,
    /// Pre-filled resolution when the blind passes agree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Vec<EntitySpan>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<EntitySpan>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPayload {
    pub iteration: u32,
    pub annotator_id: String,
    pub role: Role,
    pub items: Vec<BatchItem>,
    pub closeable: bool,
}

/// Spans for one sentence as submitted over the API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSubmission {
    pub sentence_id: SentenceId,
    pub spans: Vec<EntitySpan>,
}

/// An adjudicator's resolution. Without spans the server uses the
/// agreed blind annotation, if there is one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSubmission {
    pub sentence_id: SentenceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<EntitySpan>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub lints: Vec<RecordFindings>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// How each accepted resolution differs from the blind passes.
    pub diffs: BTreeMap<SentenceId, Vec<SpanDiff>>,
    pub closeable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u32,
    pub labeled: usize,
    pub validation_f1: BTreeMap<EntityType, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProgress {
    pub iteration: u32,
    pub size: usize,
    /// Sentences with blind passes from enough distinct annotators.
    pub blind_complete: usize,
    pub gold_complete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: u32,
    pub terminal: bool,
    pub trace: Vec<TracePoint>,
    pub counts: EntityCounts,
    pub counts_table: String,
    pub open_batch: Option<BatchProgress>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceView {
    pub sentence: Sentence,
    pub pretag: Option<SentenceAnnotation>,
    pub blind: Vec<SentenceAnnotation>,
    pub gold: Option<SentenceAnnotation>,
    pub labeled: bool,
}

impl Project {
    fn require_open_batch(&self) -> Result<&crate::annotation::AnnotationBatch> {
        if self.is_terminal() {
            return Err(Error::Workflow("iteration not ready: the loop has terminated".into()));
        }
        self.open_batch().ok_or_else(|| Error::Workflow("iteration not ready: no open batch".into()))
    }

    /// Spans both blind passes agree on, when there are exactly enough
    /// passes and they match.
    fn proposal(&self, id: &str) -> Option<Vec<EntitySpan>> {
        let blind = self.blind_for(id);
        if blind.len() < self.config().min_blind_annotators.max(1) {
            return None;
        }
        let mut it = blind.values();
        let first = it.next()?;
        it.all(|b| b.agrees_with(first)).then(|| first.span_set().into_iter().collect())
    }

    /// True when every open-batch sentence has a gold record.
    pub fn batch_closeable(&self) -> bool {
        let Some(batch) = self.open_batch() else {
            return false;
        };
        let gold = self.latest(Phase::Gold);
        batch.sentence_ids.iter().all(|id| gold.contains_key(id.as_str()))
    }

    /// The open batch with pre-tags and lint hints. Pure: repeated calls
    /// return the same payload until something is submitted.
    pub fn next_batch(&self, session: &ApiSession) -> Result<BatchPayload> {
        let batch = self.require_open_batch()?;
        let pretag = self.latest(Phase::Pretag);
        let gold = self.latest(Phase::Gold);
        let items = batch
            .sentence_ids
            .iter()
            .zip(&batch.split_hint)
            .map(|(id, &split)| {
                let s = self.pool().get(id).expect("batch ids are in the pool");
                let pre = pretag.get(id.as_str()).map(|a| (*a).clone());
                let lints = pre.as_ref().map(|a| validate_annotation(s, a)).unwrap_or_default();
                let blind = self.blind_for(id);
                let adjudicator = session.role == Role::Adjudicator;
                BatchItem {
                    sentence_id: id.clone(),
                    text: s.text.clone(),
                    tokens: s.tokens.clone(),
                    split,
                    pretag: pre.map(|a| a.spans).unwrap_or_default(),
                    lints,
                    own: blind.get(session.annotator_id.as_str()).map(|a| a.spans.clone()),
                    blind: adjudicator
                        .then(|| blind.iter().map(|(who, a)| (who.to_string(), a.spans.clone())).collect()),
                    proposal: if adjudicator { self.proposal(id) } else { None },
                    gold: gold.get(id.as_str()).map(|a| a.spans.clone()),
                }
            })
            .collect();
        Ok(BatchPayload {
            iteration: batch.iteration,
            annotator_id: session.annotator_id.clone(),
            role: session.role,
            items,
            closeable: self.batch_closeable(),
        })
    }

    fn reject_outside_batch(&self, ids: impl Iterator<Item = SentenceId>) -> Result<(Vec<SentenceId>, Vec<Rejection>)> {
        let batch = self.require_open_batch()?;
        let mut ok = Vec::new();
        let mut rejected = Vec::new();
        for id in ids {
            if batch.sentence_ids.contains(&id) {
                ok.push(id);
            } else {
                rejected.push(Rejection {
                    sentence_id: id,
                    reason: "sentence is not in the open batch".into(),
                    findings: vec![],
                });
            }
        }
        Ok((ok, rejected))
    }

    /// Stores an annotator's blind pass for sentences of the open batch.
    /// A repeat submission for the same sentence replaces the earlier one.
    pub fn submit_blind(&mut self, session: &ApiSession, submissions: Vec<SpanSubmission>) -> Result<SubmitReport> {
        if session.role != Role::Annotator {
            return Err(Error::Workflow("blind annotations come from the annotator role".into()));
        }
        if self.batch_closeable() {
            return Err(Error::Workflow("batch is closed: every sentence has gold".into()));
        }
        let (ok, mut rejected) = self.reject_outside_batch(submissions.iter().map(|s| s.sentence_id.clone()))?;
        let gold = self.latest(Phase::Gold);
        let mut records = Vec::new();
        for s in submissions.into_iter().filter(|s| ok.contains(&s.sentence_id)) {
            if gold.contains_key(s.sentence_id.as_str()) {
                rejected.push(Rejection {
                    sentence_id: s.sentence_id,
                    reason: "sentence already has gold".into(),
                    findings: vec![],
                });
                continue;
            }
            records.push(SentenceAnnotation::new(s.sentence_id, Phase::Blind, &session.annotator_id, s.spans));
        }
        let report = self.import_annotations(records, Phase::Blind, false)?;
        rejected.extend(report.rejected);
        Ok(SubmitReport { accepted: report.imported, rejected, lints: report.warnings })
    }

    /// Commits adjudicated gold for open-batch sentences that have the
    /// required blind passes. Gold can be revised until the iteration runs.
    pub fn submit_gold(&mut self, session: &ApiSession, submissions: Vec<GoldSubmission>) -> Result<GoldReport> {
        if session.role != Role::Adjudicator {
            return Err(Error::Workflow("gold annotations come from the adjudicator role".into()));
        }
        let (ok, mut rejected) = self.reject_outside_batch(submissions.iter().map(|s| s.sentence_id.clone()))?;
        let need = self.config().min_blind_annotators;
        let mut records = Vec::new();
        let mut diffs = BTreeMap::new();
        for sub in submissions.into_iter().filter(|s| ok.contains(&s.sentence_id)) {
            let blind: Vec<SentenceAnnotation> = self.blind_for(&sub.sentence_id).into_values().cloned().collect();
            if blind.len() < need {
                rejected.push(Rejection {
                    sentence_id: sub.sentence_id,
                    reason: format!("missing blind phase: {} of {need} annotators", blind.len()),
                    findings: vec![],
                });
                continue;
            }
            let spans = match sub.spans.or_else(|| self.proposal(&sub.sentence_id)) {
                Some(s) => s,
                None => {
                    rejected.push(Rejection {
                        sentence_id: sub.sentence_id,
                        reason: "blind passes disagree and no resolution was given".into(),
                        findings: vec![],
                    });
                    continue;
                }
            };
            let resolution =
                SentenceAnnotation::new(sub.sentence_id.clone(), Phase::Gold, &session.annotator_id, spans);
            let sentence = self.pool().get(&sub.sentence_id).expect("batch ids are in the pool");
            let empty = SentenceAnnotation::new(sub.sentence_id.clone(), Phase::Blind, "", vec![]);
            let a = blind.first().unwrap_or(&empty);
            let b = blind.get(1).unwrap_or(a);
            match adjudicate(sentence, a, b, &resolution) {
                Ok(adj) => {
                    diffs.insert(sub.sentence_id, adj.diff);
                    records.push(adj.gold);
                }
                Err(_) => records.push(resolution),
            }
        }
        let report = self.import_annotations(records, Phase::Gold, need == 0)?;
        for r in &report.rejected {
            diffs.remove(&r.sentence_id);
        }
        rejected.extend(report.rejected);
        Ok(GoldReport { accepted: report.imported, rejected, diffs, closeable: self.batch_closeable() })
    }

    /// Closes the batch and runs one loop iteration.
    pub fn close_and_run(&mut self) -> Result<IterationRecord> {
        self.require_open_batch()?;
        if !self.batch_closeable() {
            return Err(Error::Workflow("iteration not ready: batch has sentences without gold".into()));
        }
        self.run_iteration()
    }

    pub fn metrics(&self) -> Metrics {
        let trace = self
            .history()
            .iter()
            .map(|r| TracePoint {
                iteration: r.iteration,
                labeled: r.counts.train + r.counts.validation,
                validation_f1: r.validation_f1.clone(),
            })
            .collect();
        let counts = EntityCounts::from_annotations(&self.gold());
        let open_batch = self.open_batch().filter(|_| !self.is_terminal()).map(|b| {
            let gold = self.latest(Phase::Gold);
            BatchProgress {
                iteration: b.iteration,
                size: b.len(),
                blind_complete: b
                    .sentence_ids
                    .iter()
                    .filter(|id| self.blind_for(id).len() >= self.config().min_blind_annotators)
                    .count(),
                gold_complete: b.sentence_ids.iter().filter(|id| gold.contains_key(id.as_str())).count(),
            }
        });
        Metrics {
            iteration: self.iteration(),
            terminal: self.is_terminal(),
            trace,
            counts_table: counts.to_table("gold"),
            counts,
            open_batch,
        }
    }

    pub fn sentence_view(&self, id: &str) -> Result<SentenceView> {
        let sentence = self.pool().get(id).cloned().ok_or_else(|| Error::UnknownSentence(id.to_string()))?;
        Ok(SentenceView {
            sentence,
            pretag: self.latest(Phase::Pretag).get(id).map(|a| (*a).clone()),
            blind: self.blind_for(id).into_values().cloned().collect(),
            gold: self.latest(Phase::Gold).get(id).map(|a| (*a).clone()),
            labeled: self.learner().is_some_and(|l| l.is_labeled(id)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::active_learning::TfIdf;
    use crate::corpus::SentencePool;
    use crate::project::{init_project, ProjectConfig};
    use crate::synthetic::{generate_corpus, SyntheticConfig};
    use crate::taggers::TrainConfig;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn project(dir: &std::path::Path, sentences: usize, k: usize) -> (Project, BTreeMap<String, SentenceAnnotation>) {
        let corpus = generate_corpus(&SyntheticConfig { sentences, mobility_rate: 0.5, ..Default::default() });
        let mut cfg = ProjectConfig::default();
        cfg.learner.k = k;
        cfg.learner.etypes = vec![EntityType::Action];
        cfg.learner.train = TrainConfig { epochs: 3, hash_buckets: 1 << 8, ..TrainConfig::default() };
        let mut p = init_project(dir, &cfg).unwrap();
        let pool: SentencePool = corpus.iter().map(|s| s.sentence.clone()).collect();
        p.set_pool(pool, &TfIdf).unwrap();
        let gold = corpus.into_iter().map(|s| (s.gold.sentence_id.clone(), s.gold)).collect();
        (p, gold)
    }

    fn open_ids(p: &Project) -> Vec<String> {
        p.open_batch().unwrap().sentence_ids.clone()
    }

    fn subs(ids: &[String], gold: &BTreeMap<String, SentenceAnnotation>) -> Vec<SpanSubmission> {
        ids.iter().map(|id| SpanSubmission { sentence_id: id.clone(), spans: gold[id].spans.clone() }).collect()
    }

    #[test]
    fn full_cycle_with_auto_proposal() {
        let dir = tempfile::tempdir().unwrap();
        let (mut p, gold) = project(dir.path(), 40, 6);
        let a = ApiSession::annotator("ann-a").unwrap();
        let b = ApiSession::annotator("ann-b").unwrap();
        let adj = ApiSession::adjudicator("adj").unwrap();
        assert!(matches!(p.next_batch(&a), Err(Error::Workflow(_))));
        let seed: Vec<String> = p.pool().ids().take(5).map(String::from).collect();
        p.open_seed(seed.clone()).unwrap();
        let first = p.next_batch(&a).unwrap();
        assert_eq!(first.items.len(), 5);
        assert_eq!(p.next_batch(&a).unwrap(), first);

        assert_eq!(p.submit_blind(&a, subs(&seed, &gold)).unwrap().accepted, 5);
        let r = p
            .submit_gold(&adj, seed.iter().map(|id| GoldSubmission { sentence_id: id.clone(), spans: None }).collect())
            .unwrap();
        assert_eq!(r.accepted, 0);
        assert!(r.rejected.iter().all(|x| x.reason.starts_with("missing blind phase")));
        assert!(!r.closeable);

        assert_eq!(p.submit_blind(&b, subs(&seed, &gold)).unwrap().accepted, 5);
        let view = p.next_batch(&adj).unwrap();
        for it in &view.items {
            assert_eq!(it.proposal.as_ref(), Some(&gold[&it.sentence_id].span_set().into_iter().collect::<Vec<_>>()));
        }
        let part = vec![GoldSubmission { sentence_id: seed[0].clone(), spans: None }];
        let r = p.submit_gold(&adj, part).unwrap();
        assert_eq!((r.accepted, r.closeable), (1, false));
        assert!(matches!(p.close_and_run(), Err(Error::Workflow(_))));
        let rest = seed[1..].iter().map(|id| GoldSubmission { sentence_id: id.clone(), spans: None }).collect();
        let r = p.submit_gold(&adj, rest).unwrap();
        assert_eq!((r.accepted, r.closeable), (4, true));
        assert!(matches!(p.submit_blind(&a, subs(&seed, &gold)), Err(Error::Workflow(_))));

        let record = p.close_and_run().unwrap();
        assert_eq!(record.iteration, 1);
        assert!(record.validation_f1.contains_key(&EntityType::Action));
        let next = p.next_batch(&a).unwrap();
        assert_eq!(next.iteration, 1);
        assert_eq!(next.items.len(), 6);
        let m = p.metrics();
        assert_eq!(m.trace.len(), 1);
        assert_eq!(m.counts.sentences, 5);
    }

    #[test]
    fn disagreement_needs_an_explicit_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let (mut p, gold) = project(dir.path(), 20, 4);
        let id = gold.values().find(|g| !g.spans.is_empty()).unwrap().sentence_id.clone();
        p.open_seed(vec![id.clone()]).unwrap();
        let a = ApiSession::annotator("a").unwrap();
        let b = ApiSession::annotator("b").unwrap();
        let adj = ApiSession::adjudicator("g").unwrap();
        p.submit_blind(&a, vec![SpanSubmission { sentence_id: id.clone(), spans: gold[&id].spans.clone() }]).unwrap();
        p.submit_blind(&b, vec![SpanSubmission { sentence_id: id.clone(), spans: vec![] }]).unwrap();
        assert_eq!(p.next_batch(&adj).unwrap().items[0].proposal, None);
        let r = p.submit_gold(&adj, vec![GoldSubmission { sentence_id: id.clone(), spans: None }]).unwrap();
        assert_eq!(r.accepted, 0);
        let r = p
            .submit_gold(&adj, vec![GoldSubmission { sentence_id: id.clone(), spans: Some(gold[&id].spans.clone()) }])
            .unwrap();
        assert_eq!(r.accepted, 1);
        assert!(r.closeable);
    }

    #[test]
    fn hard_lint_and_foreign_sentences_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut p, gold) = project(dir.path(), 20, 4);
        let ids: Vec<String> = gold.keys().take(3).cloned().collect();
        p.open_seed(ids[..2].to_vec()).unwrap();
        let a = ApiSession::annotator("a").unwrap();
        let overlap = vec![EntitySpan::new(0, 2, EntityType::Action), EntitySpan::new(1, 3, EntityType::Action)];
        let r = p
            .submit_blind(
                &a,
                vec![
                    SpanSubmission { sentence_id: ids[0].clone(), spans: overlap },
                    SpanSubmission { sentence_id: ids[2].clone(), spans: vec![] },
                ],
            )
            .unwrap();
        assert_eq!(r.accepted, 0);
        assert_eq!(r.rejected.len(), 2);
        assert!(p.submit_gold(&a, vec![]).is_err());
    }

    #[derive(Debug, Clone)]
    enum Call {
        Next,
        Blind(usize),
        Gold,
        Run,
    }

    fn call() -> impl Strategy<Value = Call> {
        prop_oneof![Just(Call::Next), (0..3usize).prop_map(Call::Blind), Just(Call::Gold), Just(Call::Run)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Random call sequences against a reference model of the
        /// blind -> gold -> close -> train -> select order.
        #[test]
        fn transitions_follow_the_workflow_order(calls in prop::collection::vec(call(), 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let (mut p, gold) = project(dir.path(), 16, 4);
            let seed: Vec<String> = p.pool().ids().take(3).map(String::from).collect();
            p.open_seed(seed).unwrap();
            let annotators = ["a", "b", "c"];
            let adj = ApiSession::adjudicator("g").unwrap();
            let mut blind_by: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
            let mut gold_done: BTreeSet<String> = BTreeSet::new();
            let mut iteration = 0;
            for c in calls {
                let terminal = p.is_terminal();
                let ids = if terminal { vec![] } else { open_ids(&p) };
                let closed = !terminal && ids.iter().all(|id| gold_done.contains(id));
                match c {
                    Call::Next => prop_assert_eq!(p.next_batch(&adj).is_ok(), !terminal),
                    Call::Blind(i) => {
                        let who = ApiSession::annotator(annotators[i]).unwrap();
                        let r = p.submit_blind(&who, subs(&ids, &gold));
                        if terminal || closed {
                            prop_assert!(r.is_err());
                        } else {
                            let r = r.unwrap();
                            let fresh = ids.iter().filter(|id| !gold_done.contains(*id)).count();
                            prop_assert_eq!(r.accepted, fresh);
                            for id in ids.iter().filter(|id| !gold_done.contains(*id)) {
                                blind_by.entry(id.clone()).or_default().insert(i);
                            }
                        }
                    }
                    Call::Gold => {
                        let sub = ids.iter().map(|id| GoldSubmission { sentence_id: id.clone(), spans: None }).collect();
                        let r = p.submit_gold(&adj, sub);
                        if terminal {
                            prop_assert!(r.is_err());
                        } else {
                            let r = r.unwrap();
                            let ready: Vec<&String> = ids
                                .iter()
                                .filter(|id| blind_by.get(*id).is_some_and(|s| s.len() >= 2))
                                .collect();
                            prop_assert_eq!(r.accepted, ready.len());
                            gold_done.extend(ready.into_iter().cloned());
                            prop_assert_eq!(r.closeable, ids.iter().all(|id| gold_done.contains(id)));
                        }
                    }
                    Call::Run => {
                        let r = p.close_and_run();
                        prop_assert_eq!(r.is_ok(), closed);
                        if closed {
                            iteration += 1;
                        }
                    }
                }
                prop_assert_eq!(p.iteration(), iteration);
                let l = p.learner().unwrap();
                let pending = p.open_batch().map_or(0, |b| b.len());
                prop_assert_eq!(l.labeled_count() + pending + l.unlabeled().len(), p.pool().len());
            }
        }
    }
}
