//! Averaged structured perceptron over the same features and BIO masking as
//! the CRF.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{TaggerKind, TaggerModel, TrainConfig, NUM_TAGS};
use super::{best_of_validation, EncodedExample};
use crate::annotation::{EntityType, Tag};
use crate::error::{Error, Result};

/// Running sums for the averaging trick: `avg = w - u / c`, where `c` counts
/// examples seen and each update is recorded in `u` scaled by the count at the
/// time. The result is the mean of the weights after every example.
struct Averager {
    u_weights: Vec<f64>,
    u_start: [f64; NUM_TAGS],
    u_trans: [[f64; NUM_TAGS]; NUM_TAGS],
    c: f64,
}

impl Averager {
    fn average(&self, model: &TaggerModel) -> TaggerModel {
        let mut avg = model.clone();
        for (w, u) in avg.weights.iter_mut().zip(&self.u_weights) {
            *w -= u / self.c;
        }
        for y in 0..NUM_TAGS {
            avg.start[y] -= self.u_start[y] / self.c;
            for c in 0..NUM_TAGS {
                avg.transitions[y][c] -= self.u_trans[y][c] / self.c;
            }
        }
        avg
    }
}

fn update(model: &mut TaggerModel, avg: &mut Averager, ex: &EncodedExample, pred: &[Tag]) {
    let c = avg.c;
    let mut bump = |model: &mut TaggerModel, tags: &[Tag], sign: f64| {
        for (t, (f, &y)) in ex.features.iter().zip(tags).enumerate() {
            let y = y.index();
            for &id in f {
                let i = id as usize * NUM_TAGS + y;
                model.weights[i] += sign;
                avg.u_weights[i] += sign * c;
            }
            if t == 0 {
                model.start[y] += sign;
                avg.u_start[y] += sign * c;
            } else {
                let p = tags[t - 1].index();
                model.transitions[p][y] += sign;
                avg.u_trans[p][y] += sign * c;
            }
        }
    };
    bump(model, &ex.tags, 1.0);
    bump(model, pred, -1.0);
}

/// Trains with seeded shuffling each epoch. Stops early after an epoch with
/// no mistakes, or on validation patience when a validation set is given.
pub fn train_perceptron(
    etype: EntityType,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TaggerModel> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut model = TaggerModel::zeros(TaggerKind::Perceptron, etype, config.clone());
    if config.epochs == 0 {
        return Ok(model);
    }
    let mut avg = Averager {
        u_weights: vec![0.0; model.weights.len()],
        u_start: [0.0; NUM_TAGS],
        u_trans: [[0.0; NUM_TAGS]; NUM_TAGS],
        c: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tracker = best_of_validation(valid, config.patience);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut mistakes = 0;
        for &i in &order {
            let ex = &train[i];
            let pred = model.viterbi(&ex.features);
            if pred != ex.tags {
                mistakes += 1;
                update(&mut model, &mut avg, ex, &pred);
            }
            avg.c += 1.0;
        }
        if tracker.observe(epoch, &avg.average(&model)) || mistakes == 0 {
            break;
        }
    }
    Ok(tracker.finish(avg.average(&model)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { hash_buckets: 256, epochs: 20, ..TrainConfig::default() }
    }

    #[test]
    fn separable_data_is_fit() {
        let data = vec![
            EncodedExample { features: vec![vec![1], vec![2], vec![3]], tags: vec![Tag::O, Tag::B, Tag::I] },
            EncodedExample { features: vec![vec![2], vec![4]], tags: vec![Tag::B, Tag::O] },
        ];
        let m = train_perceptron(EntityType::Action, &data, &[], &cfg()).unwrap();
        for ex in &data {
            assert_eq!(m.viterbi(&ex.features), ex.tags);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let data: Vec<EncodedExample> = (0..10u32)
            .map(|i| EncodedExample {
                features: vec![vec![i % 5], vec![(i * 3) % 7 + 10]],
                tags: if i % 2 == 0 { vec![Tag::B, Tag::O] } else { vec![Tag::O, Tag::B] },
            })
            .collect();
        let a = train_perceptron(EntityType::Mobility, &data, &[], &cfg()).unwrap();
        let b = train_perceptron(EntityType::Mobility, &data, &[], &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn averaging_matches_naive_sum() {
        // averaged weights equal the mean of the weights after every example
        let data = vec![
            EncodedExample { features: vec![vec![0], vec![1]], tags: vec![Tag::B, Tag::I] },
            EncodedExample { features: vec![vec![1]], tags: vec![Tag::B] },
        ];
        let config = TrainConfig { hash_buckets: 4, epochs: 1, seed: 5, ..TrainConfig::default() };
        let trained = train_perceptron(EntityType::Action, &data, &[], &config).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut m = TaggerModel::zeros(TaggerKind::Perceptron, EntityType::Action, config.clone());
        let mut snapshots = Vec::new();
        for &i in &order {
            let pred = m.viterbi(&data[i].features);
            if pred != data[i].tags {
                let mut scratch = Averager {
                    u_weights: vec![0.0; m.weights.len()],
                    u_start: [0.0; NUM_TAGS],
                    u_trans: [[0.0; NUM_TAGS]; NUM_TAGS],
                    c: 0.0,
                };
                update(&mut m, &mut scratch, &data[i], &pred);
            }
            snapshots.push(m.clone());
        }
        let k = snapshots.len() as f64;
        for (j, w) in trained.weights.iter().enumerate() {
            let naive: f64 = snapshots.iter().map(|s| s.weights[j]).sum::<f64>() / k;
            assert!((w - naive).abs() < 1e-12, "weight {j}: {w} vs {naive}");
        }
        for y in 0..NUM_TAGS {
            let naive: f64 = snapshots.iter().map(|s| s.start[y]).sum::<f64>() / k;
            assert!((trained.start[y] - naive).abs() < 1e-12);
        }
    }
}
