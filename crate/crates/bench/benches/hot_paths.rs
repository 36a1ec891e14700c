use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mobal_bench::{corpus, encoded};
use mobal_core::active_learning::{precompute_density, TfIdf, Vectorizer};
use mobal_core::annotation::EntityType;
use mobal_core::retrieval::{query_any_keyword, InvertedIndex, KeywordSet};
use mobal_core::taggers::{crf_objective, train_tagger, TaggerKind, TaggerModel, TrainConfig};

fn trained(kind: TaggerKind) -> TaggerModel {
    let (c, _) = corpus(300);
    let cfg = TrainConfig { epochs: 10, hash_buckets: 1 << 16, ..TrainConfig::default() };
    train_tagger(kind, EntityType::Action, &encoded(&c, cfg.hash_buckets), &[], &cfg).unwrap()
}

fn viterbi(c: &mut Criterion) {
    let model = trained(TaggerKind::Perceptron);
    let (test, _) = corpus(200);
    let data = encoded(&test, 1 << 16);
    c.bench_function("viterbi/200 sentences", |b| {
        b.iter(|| {
            for ex in &data {
                black_box(model.viterbi(&ex.features));
            }
        })
    });
}

fn objective(c: &mut Criterion) {
    let model = trained(TaggerKind::Crf);
    let (train, _) = corpus(300);
    let data = encoded(&train, 1 << 16);
    c.bench_function("crf objective/300 sentences", |b| {
        b.iter(|| black_box(crf_objective(&model, &data, 0.1).unwrap()))
    });
}

fn density(c: &mut Criterion) {
    let mut group = c.benchmark_group("density");
    group.sample_size(10);
    for n in [500, 2000] {
        let (_, pool) = corpus(n);
        let vectors = TfIdf.vectorize(&pool).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(precompute_density(&pool, &vectors).unwrap()))
        });
    }
    group.finish();
}

fn query(c: &mut Criterion) {
    let (_, pool) = corpus(5000);
    let index = InvertedIndex::build(&pool).unwrap();
    let ks = KeywordSet::from_seed(&["walk", "stand", "climb", "transfer", "sit"]).unwrap();
    c.bench_function("query/5000 sentences", |b| b.iter(|| black_box(query_any_keyword(&index, &ks).unwrap())));
    c.bench_function("index build/5000 sentences", |b| b.iter(|| black_box(InvertedIndex::build(&pool).unwrap())));
}

criterion_group!(benches, viterbi, objective, density, query);
criterion_main!(benches);
