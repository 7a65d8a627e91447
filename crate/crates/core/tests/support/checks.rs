//! Randomized invariant cases shared by the property and acceptance
//! targets: each builds one instance and reports how far it lands from
//! the ideal, leaving the tolerance to the caller.

#![allow(dead_code)]

use mvid_core::align::{self, MergeLayout, SinkhornConfig};
use mvid_core::losses::{self, LossConfig};
use mvid_core::metrics;
use mvid_core::model::AlignmentMatrices;
use mvid_core::synthgen::{sample_standard_normal, stream_rng};
use mvid_core::tape::{Metric, Tape};
use mvid_core::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| sample_standard_normal(rng)).collect(),
    )
    .unwrap()
}

/// Sinkhorn a random normal logit matrix; returns the worst row/column
/// sum deviation and whether all entries stayed nonnegative.
pub fn sinkhorn_case(d: usize, rng: &mut ChaCha8Rng) -> (f64, bool) {
    let logits = randn(d, d, rng);
    let b = align::sinkhorn(&logits, &SinkhornConfig::default()).unwrap();
    (align::ds_deviation(&b), b.data().iter().all(|&x| x >= 0.0))
}

pub fn best_permutation_by_enumeration(m: &Tensor) -> f64 {
    let d = m.rows();
    let mut order: Vec<usize> = (0..d).collect();
    let mut best = f64::NEG_INFINITY;
    // Heap's algorithm over all d! orders
    let mut c = vec![0usize; d];
    let score = |ord: &[usize]| -> f64 { ord.iter().enumerate().map(|(i, &j)| m.at(i, j)).sum() };
    best = best.max(score(&order));
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            best = best.max(score(&order));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Binarize a random soft matrix; returns achieved minus exhaustive
/// optimum (must be ≥ a small negative rounding slack) and whether the
/// result is a valid permutation.
pub fn binarize_case(d: usize, rng: &mut ChaCha8Rng) -> (f64, bool) {
    let soft = Tensor::matrix(
        d,
        d,
        (0..d * d).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let perm = align::binarize_permutation(&soft).unwrap();
    let mut seen = vec![false; d];
    let mut valid = true;
    for &j in &perm {
        if j >= d || seen[j] {
            valid = false;
            break;
        }
        seen[j] = true;
    }
    let achieved: f64 = perm.iter().enumerate().map(|(i, &j)| soft.at(i, j)).sum();
    (achieved - best_permutation_by_enumeration(&soft), valid)
}

/// Score a signed scaled permutation of white noise; returns |MCC − 1|.
pub fn mcc_case(d: usize, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let z = randn(n, d, rng);
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let scales: Vec<f64> = (0..d)
        .map(|_| {
            let mag = rng.random_range(0.25..4.0);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    let mut est = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            est[t * d + i] = scales[i] * z.at(t, perm[i]);
        }
    }
    let est = Tensor::matrix(n, d, est).unwrap();
    (metrics::mcc(&est, &z).unwrap().score - 1.0).abs()
}

/// Score a well-conditioned invertible linear map of white noise;
/// returns the worst |R² − 1| over the mean and every channel.
pub fn r2_case(d: usize, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let z = randn(n, d, rng);
    // orthogonal, diagonal, orthogonal keeps the map invertible
    let mut q1 = randn(d, d, rng);
    let mut q2 = randn(d, d, rng);
    mvid_core::linalg::orthonormalize_columns(&mut q1).unwrap();
    mvid_core::linalg::orthonormalize_columns(&mut q2).unwrap();
    let mut m = q1;
    for i in 0..d {
        let s = rng.random_range(0.5..2.0);
        for j in 0..d {
            let v = m.at(j, i) * s;
            m.set(j, i, v);
        }
    }
    let m = m.matmul(&q2.transpose()).unwrap();
    let est = z.matmul(&m.transpose()).unwrap();
    let out = metrics::r_squared(&est, &z).unwrap();
    let mut worst = (out.mean - 1.0).abs();
    for r in &out.per_channel {
        worst = worst.max((r - 1.0).abs());
    }
    worst
}

/// With a fixed random representation, evaluate the contrastive loss
/// minus log M at growing negative counts; the successive differences
/// must shrink toward a stable limit.
pub fn contrastive_gap_differences() -> (Vec<f64>, f64, f64) {
    let mut rng = stream_rng(17, 914);
    let d = 4;
    let n_anchor = 64;
    let pool = 10_000;
    let z = randn(pool + n_anchor, d, &mut rng);
    let encoder = mvid_core::model::Mlp::new(&[d, 16, 16, d], false, &mut rng);
    let all = {
        let mut tape = Tape::new();
        let x = tape.constant(z.clone());
        let bound = encoder.bind(&mut tape, false);
        let out = bound.forward(&mut tape, x).unwrap();
        tape.value(out).clone()
    };
    let anchors = all.gather_rows(&(0..n_anchor).collect::<Vec<_>>());
    let positives = {
        // positives perturb the anchors, mimicking a prediction target
        let noise = randn(n_anchor, d, &mut rng);
        let mut p = anchors.clone();
        for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.3 * b;
        }
        p
    };
    let cfg = LossConfig {
        metric: Metric::L1,
        ..LossConfig::default()
    };
    let loss_at = |m: usize| -> f64 {
        let rows: Vec<usize> = (n_anchor..n_anchor + m).collect();
        let negatives = all.gather_rows(&rows);
        let mut tape = Tape::new();
        let a = tape.constant(anchors.clone());
        let p = tape.constant(positives.clone());
        let neg = tape.constant(negatives);
        let l = losses::contrastive_loss_with_negatives(&mut tape, a, p, neg, &cfg).unwrap();
        tape.value(l).item()
    };
    let gaps: Vec<f64> = [100usize, 1000, 10_000]
        .iter()
        .map(|&m| loss_at(m) - (m as f64).ln())
        .collect();
    let d1 = (gaps[1] - gaps[0]).abs();
    let d2 = (gaps[2] - gaps[1]).abs();
    (gaps, d1, d2)
}

/// Drive the permutation phase alone against a planted channel shuffle
/// between two fully overlapping views; returns the step at which the
/// binarized permutations first composed to the planted one.
pub fn planted_recovery(d: usize, seed: u64, max_steps: usize) -> Option<usize> {
    let mut rng = stream_rng(seed, 915);
    let n = 256;
    let z = randn(n, d, &mut rng);
    let mut sigma: Vec<usize> = (0..d).collect();
    sigma.shuffle(&mut rng);
    let mut e2 = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            e2[t * d + j] = z.at(t, sigma[j]) + 0.01 * sample_standard_normal(&mut rng);
        }
    }
    let e2 = Tensor::matrix(n, d, e2).unwrap();
    let layout = MergeLayout::new(d, vec![d, d]).unwrap();
    let sk = SinkhornConfig::default();
    let mut alignment = AlignmentMatrices::new_random(&[d, d], &mut rng);
    let mut adam = mvid_core::adam::AdamState::new(0.05);

    for step in 0..max_steps {
        let mut tape = Tape::new();
        let (logit_ids, ds_ids) = alignment.bind_doubly_stochastic(&mut tape, &sk, true).unwrap();
        let enc = vec![tape.constant(z.clone()), tape.constant(e2.clone())];
        let loss = align::merge_loss(&mut tape, &enc, &ds_ids, &layout, sk.entropy_weight).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Option<&[f64]>> = logit_ids.iter().map(|&id| tape.grad(id)).collect();
        let mut params = alignment.params_mut();
        adam.adam_step(&mut params, &grads).unwrap();

        if step % 10 == 9 {
            let perms = alignment.permutations(&sk).unwrap();
            let p1 = align::binarize_permutation(&perms[0]).unwrap();
            let p2 = align::binarize_permutation(&perms[1]).unwrap();
            if (0..d).all(|i| sigma[p2[i]] == p1[i]) {
                return Some(step + 1);
            }
        }
    }
    None
}
