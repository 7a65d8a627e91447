//! Central finite-difference checks of the reverse-mode gradients, run
//! over randomized graphs drawn from every loss family the trainer uses.

#![allow(dead_code)]

use std::sync::Arc;

use mvid_core::align;
use mvid_core::losses::{self, LossConfig};
use mvid_core::model::{channel_permutation, EncoderStack, Mlp, TransitionModel};
use mvid_core::synthgen::{sample_standard_normal, stream_rng};
use mvid_core::tape::{Metric, NodeId, Tape};
use mvid_core::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type RunFn = Box<dyn Fn(&[Vec<f64>], bool) -> (f64, Option<Vec<Vec<f64>>>)>;

struct Case {
    name: String,
    init: Vec<Vec<f64>>,
    run: RunFn,
}

fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| sample_standard_normal(rng)).collect()
}

fn randn_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, randn_vec(rows * cols, rng)).unwrap()
}

fn leaf(tape: &mut Tape, mut t: Tensor) -> NodeId {
    t.requires_grad = true;
    tape.leaf(&t)
}

fn write_flat(params: &mut [&mut Tensor], flats: &[Vec<f64>]) {
    assert_eq!(params.len(), flats.len());
    for (p, f) in params.iter_mut().zip(flats) {
        p.data_mut().copy_from_slice(f);
    }
}

fn read_flat(params: &[&Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.data().to_vec()).collect()
}

fn collect_grads(tape: &Tape, ids: &[NodeId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).data().len()])
        })
        .collect()
}

fn metric_for(seed: u64) -> Metric {
    if seed % 2 == 0 {
        Metric::L1
    } else {
        Metric::L2
    }
}

/// Contrastive objective on raw anchor and positive batches.
fn case_contrastive(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 900);
    let n = rng.random_range(4..9);
    let d = rng.random_range(2..6);
    let cfg = LossConfig {
        temperature: rng.random_range(0.5..2.0),
        metric: metric_for(seed),
        ..LossConfig::default()
    };
    let init = vec![randn_vec(n * d, &mut rng), randn_vec(n * d, &mut rng)];
    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, Tensor::matrix(n, d, flats[0].clone()).unwrap());
        let p = leaf(&mut tape, Tensor::matrix(n, d, flats[1].clone()).unwrap());
        let loss = losses::contrastive_loss_in_batch(&mut tape, a, p, &cfg).unwrap();
        let v = tape.value(loss).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(loss).unwrap();
        (v, Some(collect_grads(&tape, &[a, p])))
    };
    Case {
        name: format!("contrastive/{}", seed),
        init,
        run: Box::new(run),
    }
}

/// The full contrastive-phase composite: encoders into a hard merge,
/// transition prediction, contrastive plus merge plus residual plus
/// frozen-discriminator terms, exactly as the train step assembles them.
fn case_train_composite(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 901);
    let n = 6;
    let layout = align::MergeLayout::new(2, vec![3, 3]).unwrap();
    let d_total = layout.total_dim();
    let lags = 2;
    let obs_dims = [7usize, 8];
    let enc = {
        let mut mlps = Vec::new();
        for v in 0..2 {
            mlps.push(Mlp::new(&[obs_dims[v], 8, 8, layout.view_dims[v]], false, &mut rng));
        }
        EncoderStack { mlps }
    };
    let trans = TransitionModel::new_random(d_total, lags, &mut rng);
    let disc = Mlp::new(&[d_total, 8, 1], true, &mut rng);
    let cfg = LossConfig {
        metric: metric_for(seed),
        temperature: rng.random_range(0.5..1.5),
        ..LossConfig::default()
    };
    // random hard alignment, frozen for this phase
    let perm_mats: Vec<Tensor> = layout
        .view_dims
        .iter()
        .map(|&dv| {
            let mut order: Vec<usize> = (0..dv).collect();
            order.shuffle(&mut rng);
            let mut m = vec![0.0; dv * dv];
            for (i, &j) in order.iter().enumerate() {
                m[i * dv + j] = 1.0;
            }
            Tensor::matrix(dv, dv, m).unwrap()
        })
        .collect();
    let obs: Vec<Vec<Tensor>> = (0..lags + 1)
        .map(|_| (0..2).map(|v| randn_mat(n, obs_dims[v], &mut rng)).collect())
        .collect();
    let shuffle = channel_permutation(n, d_total, &mut rng);

    let n_enc = enc.params().len();
    let mut init = read_flat(&enc.params());
    init.extend(read_flat(&trans.params()));
    let enc0 = enc.clone();
    let trans0 = trans.clone();

    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let mut enc = enc0.clone();
        let mut trans = trans0.clone();
        write_flat(&mut enc.params_mut(), &flats[..n_enc]);
        write_flat(&mut trans.params_mut(), &flats[n_enc..]);

        let mut tape = Tape::new();
        let bound_enc = enc.bind(&mut tape, true);
        let mats: Vec<NodeId> = perm_mats.iter().map(|m| tape.constant(m.clone())).collect();
        let encode = |tape: &mut Tape, bound: &[mvid_core::model::BoundMlp], batch: &[Tensor]| {
            batch
                .iter()
                .zip(bound)
                .map(|(x, b)| {
                    let id = tape.constant(x.clone());
                    b.forward(tape, id).unwrap()
                })
                .collect::<Vec<NodeId>>()
        };
        let enc_anchor = encode(&mut tape, &bound_enc, &obs[0]);
        let merged_anchor =
            align::merge(&mut tape, &enc_anchor, &mats, &layout, align::MergeMode::Hard).unwrap();
        let l_m = align::merge_loss(&mut tape, &enc_anchor, &mats, &layout, 0.01).unwrap();

        let bound_trans = trans.bind(&mut tape, true);
        let merged_lags: Vec<NodeId> = (1..=lags)
            .map(|tau| {
                let e = encode(&mut tape, &bound_enc, &obs[tau]);
                align::merge(&mut tape, &e, &mats, &layout, align::MergeMode::Hard).unwrap()
            })
            .collect();
        let predicted = bound_trans.transit(&mut tape, &merged_lags).unwrap();
        let per_row = tape
            .elementwise_metric(merged_anchor, predicted, cfg.metric)
            .unwrap();
        let l_eps = tape.mean(per_row);

        let eps_hat = tape.sub(merged_anchor, predicted).unwrap();
        let eps_perm = tape
            .shuffle_rows_per_column(eps_hat, Arc::clone(&shuffle))
            .unwrap();
        let bound_disc = disc.bind(&mut tape, false);
        let logits_real = bound_disc.forward(&mut tape, eps_hat).unwrap();
        let logits_perm = bound_disc.forward(&mut tape, eps_perm).unwrap();
        let l_d = losses::discriminator_loss_model_paired(&mut tape, logits_real, logits_perm);

        let l_contr =
            losses::contrastive_loss_in_batch(&mut tape, merged_anchor, predicted, &cfg).unwrap();
        let total = losses::total_loss(&mut tape, l_contr, l_m, l_eps, l_d, &cfg).unwrap();
        let v = tape.value(total).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(total).unwrap();
        let mut ids: Vec<NodeId> = bound_enc.iter().flat_map(|b| b.param_ids()).collect();
        ids.extend(bound_trans.mat_ids.iter().copied());
        (v, Some(collect_grads(&tape, &ids)))
    };
    Case {
        name: format!("train-composite/{}", seed),
        init,
        run: Box::new(run),
    }
}

/// Merge loss through the unrolled Sinkhorn, gradients to both the
/// alignment logits and the encodings.
fn case_merge_soft(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 902);
    let n = rng.random_range(4..8);
    let d_c = if seed % 5 == 0 { 0 } else { rng.random_range(1..3) };
    let dv = d_c + rng.random_range(1..3);
    let layout = align::MergeLayout::new(d_c, vec![dv, dv]).unwrap();
    let eta = rng.random_range(0.01..0.1);
    let sk = align::SinkhornConfig {
        max_iters: 25,
        convergence_tol: 1e-300,
        entropy_weight: eta,
    };
    let mut init = Vec::new();
    for _ in 0..2 {
        init.push(randn_vec(dv * dv, &mut rng));
    }
    for _ in 0..2 {
        init.push(randn_vec(n * dv, &mut rng));
    }
    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let alignment = mvid_core::model::AlignmentMatrices {
            logits: (0..2)
                .map(|v| {
                    let mut t = Tensor::matrix(dv, dv, flats[v].clone()).unwrap();
                    t.requires_grad = true;
                    t
                })
                .collect(),
        };
        let mut tape = Tape::new();
        let (logit_ids, ds_ids) = alignment.bind_doubly_stochastic(&mut tape, &sk, true).unwrap();
        let enc_ids: Vec<NodeId> = (0..2)
            .map(|v| leaf(&mut tape, Tensor::matrix(n, dv, flats[2 + v].clone()).unwrap()))
            .collect();
        let loss = align::merge_loss(&mut tape, &enc_ids, &ds_ids, &layout, eta).unwrap();
        let v = tape.value(loss).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(loss).unwrap();
        let mut ids = logit_ids;
        ids.extend(enc_ids);
        (v, Some(collect_grads(&tape, &ids)))
    };
    Case {
        name: format!("merge-soft/{}", seed),
        init,
        run: Box::new(run),
    }
}

/// Discriminator objectives, both the paired model form and the adversary
/// form, through a bound scoring network and the channel shuffle.
fn case_discriminator(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 903);
    let n = rng.random_range(4..9);
    let d = rng.random_range(2..5);
    let mlp = Mlp::new(&[d, 8, 8, 1], true, &mut rng);
    let shuffle = channel_permutation(n, d, &mut rng);
    let adversary = seed % 2 == 1;
    let mut init = vec![randn_vec(n * d, &mut rng)];
    init.extend(read_flat(&mlp.params()));
    let mlp0 = mlp.clone();
    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let mut mlp = mlp0.clone();
        write_flat(&mut mlp.params_mut(), &flats[1..]);
        let mut tape = Tape::new();
        let res = leaf(&mut tape, Tensor::matrix(n, d, flats[0].clone()).unwrap());
        let res_perm = tape.shuffle_rows_per_column(res, Arc::clone(&shuffle)).unwrap();
        let bound = mlp.bind(&mut tape, true);
        let logits_real = bound.forward(&mut tape, res).unwrap();
        let logits_perm = bound.forward(&mut tape, res_perm).unwrap();
        let loss = if adversary {
            losses::discriminator_loss_adversary(&mut tape, logits_real, logits_perm)
        } else {
            losses::discriminator_loss_model_paired(&mut tape, logits_real, logits_perm)
        };
        let v = tape.value(loss).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(loss).unwrap();
        let mut ids = vec![res];
        ids.extend(bound.param_ids());
        (v, Some(collect_grads(&tape, &ids)))
    };
    Case {
        name: format!("discriminator/{}", seed),
        init,
        run: Box::new(run),
    }
}

/// Sinkhorn output statistics: entropy plus a random linear functional of
/// the doubly stochastic matrix.
fn case_sinkhorn_stats(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 904);
    let d = rng.random_range(2..6);
    let sk = align::SinkhornConfig {
        max_iters: 25,
        convergence_tol: 1e-300,
        entropy_weight: 0.01,
    };
    let c = randn_mat(d, d, &mut rng);
    let init = vec![randn_vec(d * d, &mut rng)];
    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, Tensor::matrix(d, d, flats[0].clone()).unwrap());
        let s = align::sinkhorn_on_tape(&mut tape, logits, &sk).unwrap();
        let ent = tape.entropy_sum(s);
        let cc = tape.constant(c.clone());
        let weighted = tape.mul_elem(s, cc).unwrap();
        let lin = tape.sum(weighted);
        let scaled = tape.scale(ent, 0.37);
        let loss = tape.add(scaled, lin).unwrap();
        let v = tape.value(loss).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(loss).unwrap();
        (v, Some(collect_grads(&tape, &[logits])))
    };
    Case {
        name: format!("sinkhorn-stats/{}", seed),
        init,
        run: Box::new(run),
    }
}

/// A chain touching the remaining primitive operations.
fn case_op_soup(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 905);
    let c34 = randn_mat(3, 4, &mut rng);
    let shuffle = channel_permutation(3, 4, &mut rng);
    let init = vec![
        randn_vec(12, &mut rng), // a: 3x4
        randn_vec(12, &mut rng), // b: 4x3
        randn_vec(3, &mut rng),  // row bias
        randn_vec(3, &mut rng),  // col bias
    ];
    let metric = metric_for(seed);
    let run = move |flats: &[Vec<f64>], want_grad: bool| {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, Tensor::matrix(3, 4, flats[0].clone()).unwrap());
        let b = leaf(&mut tape, Tensor::matrix(4, 3, flats[1].clone()).unwrap());
        let r = leaf(&mut tape, Tensor::vector(flats[2].clone()));
        let c = leaf(&mut tape, Tensor::vector(flats[3].clone()));

        let x = tape.matmul(a, b).unwrap(); // 3x3
        let x = tape.add_row_broadcast(x, r).unwrap();
        let x = tape.leaky_relu(x, 0.2);
        let x = tape.add_col_broadcast(x, c).unwrap();
        let sg = tape.sigmoid(x);
        let pos = tape.add_scalar(sg, 1.5);
        let lg = tape.ln(pos);
        let half = tape.scale(lg, 0.5);
        let ex = tape.exp(half);
        let wide = tape.concat_cols(&[ex, sg]).unwrap(); // 3x6
        let sl = tape.slice_cols(wide, 1, 5).unwrap(); // 3x4
        let rs = tape.reshape(sl, vec![4, 3]).unwrap();
        let tr = tape.transpose(rs); // 3x4
        let cl = tape.clamp(tr, -50.0, 50.0);
        let sh = tape.shuffle_rows_per_column(cl, Arc::clone(&shuffle)).unwrap();
        let cc = tape.constant(c34.clone());
        let dist = tape.elementwise_metric(sh, cc, metric).unwrap();
        let ls_rows = tape.logsumexp_rows(sl);
        let ls_all = tape.logsumexp(sl);
        let exp_sl = tape.exp(sl);
        let rsum = tape.row_sum(exp_sl);
        let csum = tape.col_sum(exp_sl);
        let divr = tape.div_row_broadcast(exp_sl, rsum).unwrap();
        let divc = tape.div_col_broadcast(exp_sl, csum).unwrap();
        let prod = tape.mul_elem(divr, divc).unwrap();

        let mut loss = tape.mean(dist);
        let t1 = tape.sum(ls_rows);
        let t2 = tape.sum(prod);
        loss = tape.add(loss, t1).unwrap();
        loss = tape.add(loss, t2).unwrap();
        loss = tape.add(loss, ls_all).unwrap();
        let v = tape.value(loss).item();
        if !want_grad {
            return (v, None);
        }
        tape.backward(loss).unwrap();
        (v, Some(collect_grads(&tape, &[a, b, r, c])))
    };
    Case {
        name: format!("op-soup/{}", seed),
        init,
        run: Box::new(run),
    }
}

struct CheckStats {
    checked: usize,
    skipped: usize,
}

/// Central differences against the tape gradient on a random subset of
/// coordinates. Stencils that straddle an activation kink show up as
/// disagreeing one-sided slopes and are skipped.
fn check_case(case: &Case, rng: &mut ChaCha8Rng, budget: usize) -> CheckStats {
    let (f0, grads) = (case.run)(&case.init, true);
    assert!(f0.is_finite(), "{}: non-finite loss {}", case.name, f0);
    let grads = grads.expect("gradients requested");

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (k, flat) in case.init.iter().enumerate() {
        for i in 0..flat.len() {
            coords.push((k, i));
        }
    }
    coords.shuffle(rng);
    coords.truncate(budget);

    let mut stats = CheckStats {
        checked: 0,
        skipped: 0,
    };
    for (k, i) in coords {
        let x = case.init[k][i];
        let h = 1e-5 * x.abs().max(1.0);
        let mut plus = case.init.clone();
        plus[k][i] = x + h;
        let mut minus = case.init.clone();
        minus[k][i] = x - h;
        let (fp, _) = (case.run)(&plus, false);
        let (fm, _) = (case.run)(&minus, false);
        let g_fd = (fp - fm) / (2.0 * h);
        let g_plus = (fp - f0) / h;
        let g_minus = (f0 - fm) / h;
        let g_ad = grads[k][i];
        if (g_plus - g_minus).abs() > 1e-2 * g_fd.abs().max(g_ad.abs()).max(1.0) {
            stats.skipped += 1;
            continue;
        }
        let tol = 1e-4 * g_ad.abs().max(g_fd.abs()) + 1e-7;
        assert!(
            (g_ad - g_fd).abs() <= tol,
            "{}: leaf {} coord {}: tape {} vs fd {} (tol {})",
            case.name,
            k,
            i,
            g_ad,
            g_fd,
            tol
        );
        stats.checked += 1;
    }
    stats
}

pub struct GradSummary {
    pub configs: usize,
    pub checked: usize,
    pub skipped: usize,
}

/// Build every case family, check a coordinate budget per case, and
/// enforce the coverage floor. Panics on any gradient mismatch.
pub fn run_gradcheck() -> GradSummary {
    let mut cases: Vec<Case> = Vec::new();
    for s in 0..20 {
        cases.push(case_contrastive(s));
    }
    for s in 0..20 {
        cases.push(case_train_composite(s));
    }
    for s in 0..20 {
        cases.push(case_merge_soft(s));
    }
    for s in 0..20 {
        cases.push(case_discriminator(s));
    }
    for s in 0..10 {
        cases.push(case_sinkhorn_stats(s));
    }
    for s in 0..15 {
        cases.push(case_op_soup(s));
    }
    assert!(cases.len() >= 100, "need at least 100 configurations");

    let mut rng = stream_rng(99, 906);
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for case in &cases {
        let stats = check_case(case, &mut rng, 16);
        checked += stats.checked;
        skipped += stats.skipped;
    }
    assert!(checked >= 1000, "too few coordinates verified: {}", checked);
    assert!(
        (skipped as f64) < 0.05 * (checked + skipped) as f64,
        "excessive kink skips: {} of {}",
        skipped,
        checked + skipped
    );
    GradSummary {
        configs: cases.len(),
        checked,
        skipped,
    }
}
