//! Linear-chain CRF: log-space forward–backward, the regularized negative
//! log-likelihood with its gradient, and batch gradient training.

use rayon::prelude::*;

use super::model::{TaggerKind, TaggerModel, TrainConfig, NUM_TAGS};
use super::{best_of_validation, EncodedExample};
use crate::annotation::{EntityType, Tag};
use crate::error::{Error, Result};

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Forward and backward log-messages for one sentence.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub log_alpha: Vec<[f64; NUM_TAGS]>,
    pub log_beta: Vec<[f64; NUM_TAGS]>,
    /// Per-token emission scores used by both passes.
    pub emissions: Vec<[f64; NUM_TAGS]>,
    /// log Z from the forward pass.
    pub log_z: f64,
    /// log Z recomputed from the backward pass.
    pub log_z_backward: f64,
}

impl ForwardBackward {
    /// Posterior tag distribution at each position.
    pub fn marginals(&self) -> Vec<[f64; NUM_TAGS]> {
        self.log_alpha
            .iter()
            .zip(&self.log_beta)
            .map(|(a, b)| {
                let mut m = [0.0; NUM_TAGS];
                for y in 0..NUM_TAGS {
                    m[y] = (a[y] + b[y] - self.log_z).exp();
                }
                m
            })
            .collect()
    }
}

pub fn forward_backward(model: &TaggerModel, features: &[Vec<u32>]) -> ForwardBackward {
    let n = features.len();
    let emissions: Vec<[f64; NUM_TAGS]> = features.iter().map(|f| model.emission(f)).collect();
    let mut log_alpha = vec![[f64::NEG_INFINITY; NUM_TAGS]; n];
    let mut log_beta = vec![[0.0; NUM_TAGS]; n];
    if n == 0 {
        return ForwardBackward { log_alpha, log_beta, emissions, log_z: 0.0, log_z_backward: 0.0 };
    }
    for y in 0..NUM_TAGS {
        log_alpha[0][y] = model.start_score(y) + emissions[0][y];
    }
    let mut buf = [0.0; NUM_TAGS];
    for t in 1..n {
        for y in 0..NUM_TAGS {
            for p in 0..NUM_TAGS {
                buf[p] = log_alpha[t - 1][p] + model.transition_score(p, y);
            }
            log_alpha[t][y] = logsumexp(&buf) + emissions[t][y];
        }
    }
    for t in (0..n - 1).rev() {
        for y in 0..NUM_TAGS {
            for c in 0..NUM_TAGS {
                buf[c] = model.transition_score(y, c) + emissions[t + 1][c] + log_beta[t + 1][c];
            }
            log_beta[t][y] = logsumexp(&buf);
        }
    }
    let log_z = logsumexp(&log_alpha[n - 1]);
    for y in 0..NUM_TAGS {
        buf[y] = model.start_score(y) + emissions[0][y] + log_beta[0][y];
    }
    let log_z_backward = logsumexp(&buf);
    ForwardBackward { log_alpha, log_beta, emissions, log_z, log_z_backward }
}

/// Gradient of the CRF objective, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub emission: Vec<f64>,
    pub start: [f64; NUM_TAGS],
    pub transitions: [[f64; NUM_TAGS]; NUM_TAGS],
}

/// Sparse per-sentence contribution, merged into the dense gradient.
struct SentenceGrad {
    nll: f64,
    emission: Vec<(u32, [f64; NUM_TAGS])>,
    start: [f64; NUM_TAGS],
    transitions: [[f64; NUM_TAGS]; NUM_TAGS],
}

fn sentence_grad(model: &TaggerModel, ex: &EncodedExample) -> SentenceGrad {
    let fb = forward_backward(model, &ex.features);
    let n = ex.features.len();
    let mut g = SentenceGrad {
        nll: 0.0,
        emission: Vec::new(),
        start: [0.0; NUM_TAGS],
        transitions: [[0.0; NUM_TAGS]; NUM_TAGS],
    };
    if n == 0 {
        return g;
    }
    g.nll = fb.log_z - model.path_score(&ex.features, &ex.tags);
    let marg = fb.marginals();
    for t in 0..n {
        let mut delta = marg[t];
        delta[ex.tags[t].index()] -= 1.0;
        for &f in &ex.features[t] {
            g.emission.push((f, delta));
        }
    }
    g.start = marg[0];
    g.start[ex.tags[0].index()] -= 1.0;
    for t in 1..n {
        for p in 0..NUM_TAGS {
            for c in 0..NUM_TAGS {
                let s = model.transition_score(p, c);
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let lp = fb.log_alpha[t - 1][p] + s + fb.emissions[t][c] + fb.log_beta[t][c] - fb.log_z;
                g.transitions[p][c] += lp.exp();
            }
        }
        g.transitions[ex.tags[t - 1].index()][ex.tags[t].index()] -= 1.0;
    }
    g
}

/// Negative conditional log-likelihood plus `(l2/2)·‖w‖²`, and its
/// gradient (expected minus empirical feature counts, plus `l2·w`).
pub fn crf_objective(model: &TaggerModel, data: &[EncodedExample], l2: f64) -> Result<(f64, Gradient)> {
    let parts: Vec<SentenceGrad> = data.par_iter().map(|ex| sentence_grad(model, ex)).collect();
    let mut grad = Gradient {
        emission: model.weights.iter().map(|w| l2 * w).collect(),
        start: [0.0; NUM_TAGS],
        transitions: [[0.0; NUM_TAGS]; NUM_TAGS],
    };
    let mut loss = 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    for y in 0..NUM_TAGS {
        loss += 0.5 * l2 * model.start[y] * model.start[y];
        grad.start[y] = l2 * model.start[y];
        for c in 0..NUM_TAGS {
            loss += 0.5 * l2 * model.transitions[y][c] * model.transitions[y][c];
            grad.transitions[y][c] = l2 * model.transitions[y][c];
        }
    }
    for p in parts {
        loss += p.nll;
        for (f, d) in p.emission {
            let base = f as usize * NUM_TAGS;
            for (g, x) in grad.emission[base..base + NUM_TAGS].iter_mut().zip(d) {
                *g += x;
            }
        }
        for y in 0..NUM_TAGS {
            grad.start[y] += p.start[y];
            for c in 0..NUM_TAGS {
                grad.transitions[y][c] += p.transitions[y][c];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    Ok((loss, grad))
}

fn step(model: &TaggerModel, grad: &Gradient, eta: f64) -> TaggerModel {
    let mut next = model.clone();
    next.weights.par_iter_mut().zip(grad.emission.par_iter()).for_each(|(w, g)| *w -= eta * g);
    for y in 0..NUM_TAGS {
        if Tag::from_index(y) != Tag::I {
            next.start[y] -= eta * grad.start[y];
        }
        for c in 0..NUM_TAGS {
            if super::model::transition_allowed(Tag::from_index(y), Tag::from_index(c)) {
                next.transitions[y][c] -= eta * grad.transitions[y][c];
            }
        }
    }
    next
}

/// Full-batch gradient descent on the objective. A step that would raise
/// the loss is retried at half the size; accepted steps grow the next one.
/// With a validation set, the weights with the best validation span F1 are
/// kept and training stops after `patience` epochs without improvement.
pub fn train_crf(
    etype: EntityType,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TaggerModel> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut model = TaggerModel::zeros(TaggerKind::Crf, etype, config.clone());
    if config.epochs == 0 {
        return Ok(model);
    }
    let n = train.len() as f64;
    let (mut loss, mut grad) = crf_objective(&model, train, config.l2)?;
    // steps are taken on the per-sentence average of the objective
    let mut eta = config.learning_rate / n;
    let mut tracker = best_of_validation(valid, config.patience);
    for epoch in 0..config.epochs {
        let mut accepted = false;
        while eta > 1e-12 / n {
            let candidate = step(&model, &grad, eta);
            let (l, g) = crf_objective(&candidate, train, config.l2)?;
            if l <= loss {
                model = candidate;
                loss = l;
                grad = g;
                eta *= 1.25;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if tracker.observe(epoch, &model) || !accepted {
            break;
        }
    }
    Ok(tracker.finish(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taggers::model::TrainConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(buckets: u32) -> TrainConfig {
        TrainConfig { hash_buckets: buckets, ..TrainConfig::default() }
    }

    /// All legal BIO sequences of length n.
    fn legal_sequences(n: usize) -> Vec<Vec<Tag>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p: Vec<Tag>| {
                    Tag::ALL.into_iter().filter_map(move |t| {
                        let prev = p.last().copied().unwrap_or(Tag::O);
                        (t != Tag::I || prev != Tag::O).then(|| {
                            let mut q = p.clone();
                            q.push(t);
                            q
                        })
                    })
                })
                .collect();
        }
        out
    }

    fn random_model(rng: &mut ChaCha8Rng, buckets: u32) -> TaggerModel {
        let mut m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, cfg(buckets));
        for w in m.weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for y in 0..NUM_TAGS {
            m.start[y] = rng.gen_range(-1.0..1.0);
            for c in 0..NUM_TAGS {
                m.transitions[y][c] = rng.gen_range(-1.0..1.0);
            }
        }
        m
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, buckets: u32) -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let mut f: Vec<u32> = (0..3).map(|_| rng.gen_range(0..buckets)).collect();
                f.sort_unstable();
                f.dedup();
                f
            })
            .collect()
    }

    #[test]
    fn zero_weight_loss_is_log_count_of_legal_sequences() {
        let m = TaggerModel::zeros(TaggerKind::Crf, EntityType::Action, cfg(16));
        for n in 1..=6 {
            let ex = EncodedExample { features: (0..n).map(|i| vec![i as u32]).collect(), tags: vec![Tag::O; n] };
            let (loss, _) = crf_objective(&m, &[ex], 0.0).unwrap();
            let z = legal_sequences(n).len() as f64;
            assert!((loss - z.ln()).abs() < 1e-12, "n={n}: {loss} vs ln {z}");
            assert!(loss < n as f64 * 3f64.ln() || n == 1);
        }
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=5 {
            let m = random_model(&mut rng, 8);
            let f = random_features(&mut rng, n, 8);
            let fb = forward_backward(&m, &f);
            let scores: Vec<f64> = legal_sequences(n).iter().map(|s| m.path_score(&f, s)).collect();
            assert!((fb.log_z - logsumexp(&scores)).abs() < 1e-9);
            assert!((fb.log_z - fb.log_z_backward).abs() < 1e-9);
            for row in fb.marginals() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stationary_point_gradient_is_l2_times_w() {
        // at the optimum the data term vanishes: grad = l2 * w
        let ex = EncodedExample { features: vec![vec![0], vec![1]], tags: vec![Tag::B, Tag::O] };
        let config = TrainConfig { hash_buckets: 4, epochs: 3000, patience: 0, l2: 0.5, learning_rate: 0.5, seed: 1 };
        let m = train_crf(EntityType::Action, std::slice::from_ref(&ex), &[], &config).unwrap();
        let (_, g) = crf_objective(&m, std::slice::from_ref(&ex), 0.5).unwrap();
        let (_, data_only) = crf_objective(&m, &[ex], 0.0).unwrap();
        for (i, (gi, di)) in g.emission.iter().zip(&data_only.emission).enumerate() {
            let expect = di + 0.5 * m.weights[i];
            assert!((gi - expect).abs() < 1e-12);
            assert!(gi.abs() < 1e-4, "gradient {gi} not ~0 at optimum");
        }
    }

    #[test]
    fn viterbi_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..60 {
            let n = 1 + trial % 6;
            let m = random_model(&mut rng, 8);
            let f = random_features(&mut rng, n, 8);
            let best = legal_sequences(n).into_iter().map(|s| m.path_score(&f, &s)).fold(f64::NEG_INFINITY, f64::max);
            let path = m.viterbi(&f);
            assert!((m.path_score(&f, &path) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let buckets = 16;
        let m = random_model(&mut rng, buckets);
        let data: Vec<EncodedExample> = (1..=4)
            .map(|n| {
                let seqs = legal_sequences(n);
                EncodedExample {
                    features: random_features(&mut rng, n, buckets),
                    tags: seqs[rng.gen_range(0..seqs.len())].clone(),
                }
            })
            .collect();
        let l2 = 0.3;
        let (_, g) = crf_objective(&m, &data, l2).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        let mut worst: f64 = 0.0;
        for i in 0..m.weights.len() {
            let mut p = m.clone();
            p.weights[i] += h;
            let mut q = m.clone();
            q.weights[i] -= h;
            let num = (crf_objective(&p, &data, l2).unwrap().0 - crf_objective(&q, &data, l2).unwrap().0) / (2.0 * h);
            worst = worst.max(rel(g.emission[i], num));
        }
        for y in 0..NUM_TAGS {
            for c in 0..NUM_TAGS {
                if !super::super::model::transition_allowed(Tag::from_index(y), Tag::from_index(c)) {
                    continue;
                }
                let mut p = m.clone();
                p.transitions[y][c] += h;
                let mut q = m.clone();
                q.transitions[y][c] -= h;
                let num =
                    (crf_objective(&p, &data, l2).unwrap().0 - crf_objective(&q, &data, l2).unwrap().0) / (2.0 * h);
                worst = worst.max(rel(g.transitions[y][c], num));
            }
            if y != Tag::I.index() {
                let mut p = m.clone();
                p.start[y] += h;
                let mut q = m.clone();
                q.start[y] -= h;
                let num =
                    (crf_objective(&p, &data, l2).unwrap().0 - crf_objective(&q, &data, l2).unwrap().0) / (2.0 * h);
                worst = worst.max(rel(g.start[y], num));
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn memorizes_a_sentence() {
        let ex = EncodedExample {
            features: vec![vec![0, 5], vec![1, 5], vec![2, 5], vec![3, 5]],
            tags: vec![Tag::O, Tag::B, Tag::I, Tag::O],
        };
        let config = TrainConfig { hash_buckets: 8, epochs: 200, l2: 0.01, ..TrainConfig::default() };
        let m = train_crf(EntityType::Action, std::slice::from_ref(&ex), &[], &config).unwrap();
        assert_eq!(m.viterbi(&ex.features), ex.tags);
    }

    #[test]
    fn empty_training_set_and_zero_epochs() {
        assert!(matches!(train_crf(EntityType::Action, &[], &[], &cfg(8)), Err(Error::EmptyTrainingSet)));
        let ex = EncodedExample { features: vec![vec![1]], tags: vec![Tag::B] };
        let zero = TrainConfig { epochs: 0, ..cfg(8) };
        assert!(train_crf(EntityType::Action, &[ex], &[], &zero).unwrap().is_zero());
    }
}
