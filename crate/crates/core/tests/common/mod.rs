#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visrep::backbone::ArchSpec;
use visrep::data::synthetic::{generate, SynthConfig, SyntheticCorpus};
use visrep::data::Dataset;
use visrep::model::{HeadStyle, ModelGraph};
use visrep::tensor::{Tape, Tensor, Var};
use visrep::train::{Preset, Regime, TrainPlan};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinked functions.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Central finite-difference check of `f` with respect to every input.
///
/// The scalar probed is `sum(w ⊙ f(inputs))` with fixed random weights `w`,
/// so every output element contributes. Returns the largest norm-wise relative
/// error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)` over inputs.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&tape, &vars).shape();
        randn(&shape, &mut rng(seed ^ 0x5eed))
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).to_tensor();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    let w = tape.constant(weights.clone());
    let loss = out.mul(&w).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-6));
    }
    worst
}
pub mod ops;

/// Mean cross-entropy of `rows` of a `[B, C]` logit matrix, computed directly.
pub fn ce_oracle(logits: &Tensor<f64>, labels: &[(usize, usize)]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .map(|&(row, y)| {
            let r = logits.row(row);
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - r[y]
        })
        .sum();
    total / labels.len() as f64
}

/// One interleaved multitask batch: `(logits per task, labels per task)`
/// where each row is labelled for exactly one task.
pub fn interleaved_batch(seed: u64, classes: &[usize], batch: usize) -> (Vec<Tensor<f64>>, Vec<Vec<Option<usize>>>) {
    let mut r = rng(seed);
    let logits = classes.iter().map(|&c| randn(&[batch, c], &mut r).map(|v| 3.0 * v)).collect();
    let mut labels = vec![vec![None; batch]; classes.len()];
    for row in 0..batch {
        let t = r.random_range(0..classes.len());
        labels[t][row] = Some(r.random_range(0..classes[t]));
    }
    (logits, labels)
}

/// `|masked multitask loss − Σ per-task losses on separated sub-batches|`,
/// the latter from the library's plain cross-entropy and from [`ce_oracle`].
pub fn masked_decomposition_gap(seed: u64) -> (f64, f64) {
    let classes = [4, 6, 3, 4];
    let (logits, labels) = interleaved_batch(seed, &classes, 32);
    let tape = Tape::new();
    let vars: Vec<_> = logits.iter().map(|l| tape.constant(l.clone())).collect();
    let joint = visrep::train::masked_cross_entropy(&vars, &labels).unwrap().value().item();

    let mut separated = 0.0;
    let mut oracle = 0.0;
    for (t, l) in logits.iter().enumerate() {
        let rows: Vec<(usize, usize)> = labels[t].iter().enumerate().filter_map(|(i, y)| y.map(|y| (i, y))).collect();
        oracle += ce_oracle(l, &rows);
        if rows.is_empty() {
            continue;
        }
        let sub = Tensor::from_rows(&rows.iter().map(|&(i, _)| l.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let ys: Vec<usize> = rows.iter().map(|&(_, y)| y).collect();
        separated += tape.constant(sub).cross_entropy(&ys).unwrap().value().item();
    }
    ((joint - separated).abs(), (joint - oracle).abs())
}

/// Random `n × n` orthogonal matrix (Gram–Schmidt on a random matrix).
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// The synthetic corpus at its default size (4 × 450 training images of 32 × 32).
pub fn desk_corpus(seed: u64) -> SyntheticCorpus {
    generate(&SynthConfig { seed, ..Default::default() })
}

/// A few listings at 16 × 16, for fast loop tests.
pub fn tiny_corpus(seed: u64) -> SyntheticCorpus {
    generate(&SynthConfig {
        image_size: 16,
        listings: 16,
        images_per_listing: 2,
        eval_listings: 8,
        seed,
        ..Default::default()
    })
}

pub fn desk_spec(input: usize) -> ArchSpec {
    ArchSpec::convnet(input, vec![1, 1, 2], vec![16, 32, 64])
}

/// The convnet multitask column of the reference table, scaled down to the
/// desk corpus.
pub fn desk_plan(regime: Regime) -> TrainPlan {
    let mut plan = TrainPlan::preset(match regime {
        Regime::Triplet => Preset::TripletEfficientnetB0,
        _ => Preset::MtEfficientnetB0,
    });
    plan.regime = regime;
    plan.base_lr = 3e-3;
    plan.bn_momentum = 0.9;
    plan.epochs = 10;
    plan.batch_size = match regime {
        Regime::SingleTask => 32,
        Regime::Multitask => 64,
        Regime::Triplet => 30,
    };
    plan.per_listing = 3;
    plan
}

/// Model with an embedding head and, outside the triplet regime, one
/// classification head per dataset.
pub fn desk_model(spec: &ArchSpec, regime: Regime, datasets: &[Dataset], seed: u64) -> ModelGraph {
    let mut m = ModelGraph::build(spec, seed).unwrap();
    m.attach_embedding_head(32, HeadStyle::ConvPool).unwrap();
    if regime != Regime::Triplet {
        let tasks: Vec<(String, usize)> = datasets.iter().map(|d| (d.task_name.clone(), d.num_classes)).collect();
        m.attach_classification_heads(&tasks).unwrap();
    }
    m
}

/// Violations of the interleaving contract over one epoch of the synthetic
/// corpus at batch 64: batches without exactly 16 rows per dataset, plus
/// rows without exactly one non-sentinel label.
pub fn sampler_violations(corpus: &SyntheticCorpus, seed: u64) -> (usize, usize) {
    use visrep::data::{interleave_batches, materialize, AugConfig, SENTINEL};
    let sizes: Vec<usize> = corpus.datasets.iter().map(Dataset::len).collect();
    let mut r = rng(seed);
    let plans = interleave_batches(&sizes, 64, &mut r).unwrap();
    let side = corpus.config.image_size;
    let aug = AugConfig::resize_only((side, side));
    let mut violations = 0;
    for p in &plans {
        let batch = materialize(p, &corpus.datasets, &[0, 1, 2, 3], 4, &aug, &mut r).unwrap();
        for d in 0..4 {
            if batch.origin.iter().filter(|o| o.0 == d).count() != 16 {
                violations += 1;
            }
        }
        for row in 0..batch.len() {
            if batch.labels.iter().filter(|t| t[row] != SENTINEL).count() != 1 {
                violations += 1;
            }
        }
    }
    (plans.len(), violations)
}

/// A random retrieval instance with repeated rows (to exercise ties).
pub fn random_retrieval(seed: u64) -> visrep::retrieval::EmbeddedDataset {
    let mut r = rng(seed);
    let nq = r.random_range(1..=200);
    let nc = r.random_range(1..=200);
    let d = r.random_range(1..=64);
    let groups = r.random_range(1..=40);
    let mut cand: Vec<Vec<f32>> = Vec::with_capacity(nc);
    for _ in 0..nc {
        if !cand.is_empty() && r.random_bool(0.1) {
            let j = r.random_range(0..cand.len());
            cand.push(cand[j].clone());
        } else {
            cand.push((0..d).map(|_| r.random_range(-1.0f32..1.0)).collect());
        }
    }
    let queries: Vec<Vec<f32>> = (0..nq)
        .map(|_| {
            if r.random_bool(0.2) {
                cand[r.random_range(0..nc)].clone()
            } else {
                (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect()
            }
        })
        .collect();
    let g = |r: &mut rand_chacha::ChaCha8Rng| format!("g{}", r.random_range(0..groups));
    visrep::retrieval::EmbeddedDataset {
        name: format!("random-{seed}"),
        queries: Tensor::from_rows(&queries).unwrap(),
        query_groups: (0..nq).map(|_| g(&mut r)).collect(),
        candidates: Tensor::from_rows(&cand).unwrap(),
        candidate_groups: (0..nc).map(|_| g(&mut r)).collect(),
    }
}

/// True positives at `k` by a full scan: every query/candidate distance,
/// a sort by (distance, index), then a group check on the first `k`.
pub fn recall_oracle(ds: &visrep::retrieval::EmbeddedDataset, k: usize) -> usize {
    let nc = ds.candidate_groups.len();
    let mut tp = 0;
    for (qi, group) in ds.query_groups.iter().enumerate() {
        let q = ds.queries.row(qi);
        let mut scored: Vec<(f64, usize)> = (0..nc)
            .map(|c| {
                let d2: f64 = q.iter().zip(ds.candidates.row(c)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                (d2.sqrt(), c)
            })
            .collect();
        scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if scored.iter().take(k).any(|&(_, c)| &ds.candidate_groups[c] == group) {
            tp += 1;
        }
    }
    tp
}
