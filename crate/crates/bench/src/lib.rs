//! Shared fixtures for the benchmarks.

use mobal_core::annotation::EntityType;
use mobal_core::corpus::SentencePool;
use mobal_core::synthetic::{generate_corpus, SyntheticConfig, SyntheticSentence};
use mobal_core::taggers::{encode_examples, EncodedExample, FeatureExtractor};

/// The synthetic corpus at `n` sentences, with its pool.
pub fn corpus(n: usize) -> (Vec<SyntheticSentence>, SentencePool) {
    let corpus = generate_corpus(&SyntheticConfig { sentences: n, ..SyntheticConfig::default() });
    let pool = corpus.iter().map(|s| s.sentence.clone()).collect();
    (corpus, pool)
}

/// Action examples encoded with `buckets` hash buckets.
pub fn encoded(corpus: &[SyntheticSentence], buckets: u32) -> Vec<EncodedExample> {
    let pairs: Vec<_> = corpus.iter().map(|s| (&s.sentence, &s.gold)).collect();
    encode_examples(&FeatureExtractor::new(buckets), EntityType::Action, &pairs).expect("ids match")
}
