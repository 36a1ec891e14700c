//! Human-in-the-loop active learning for span-annotated NER corpora.
//!
//! The pipeline: raw notes are segmented and deduplicated into a sentence
//! pool ([`corpus`]), narrowed to domain-relevant sentences by boolean
//! keyword retrieval with iterative expansion ([`retrieval`]), and then
//! annotated in batches chosen by a two-member tagger committee using
//! density-weighted vote entropy ([`active_learning`]). Annotations are
//! nested typed spans ([`annotation`]) projected to per-type BIO sequences
//! for the sequence taggers ([`taggers`]). [`evaluation`] covers span F1,
//! inter-annotator agreement and stratified cross-validation, and
//! [`project`] persists the whole loop as append-only logs.

pub mod active_learning;
pub mod annotation;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod project;
pub mod retrieval;
pub mod synthetic;
pub mod taggers;
pub mod workflow;

pub use error::{Error, Result};
