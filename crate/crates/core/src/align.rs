//! Permutation alignment across views: Sinkhorn-Knopp projection of logit
//! matrices to the Birkhoff polytope, binarization to hard permutations,
//! common-center estimation, and the merge operator assembling the full
//! latent vector from per-view encodings.

use crate::assignment::max_assignment;
use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub entropy_weight: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            max_iters: 100,
            convergence_tol: 1e-9,
            entropy_weight: 0.01,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(CoreError::config("sinkhorn max_iters must be >= 1".to_string()));
        }
        if self.convergence_tol <= 0.0 {
            return Err(CoreError::config("sinkhorn convergence_tol must be > 0".to_string()));
        }
        if self.entropy_weight <= 0.0 {
            return Err(CoreError::config("entropy_weight must be > 0".to_string()));
        }
        Ok(())
    }
}

/// How the merged latent is shaped: the shared block size and each view's
/// encoding width. Total dimension is d_c plus every view's private span.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeLayout {
    pub d_c: usize,
    pub view_dims: Vec<usize>,
}

impl MergeLayout {
    pub fn new(d_c: usize, view_dims: Vec<usize>) -> Result<Self> {
        let layout = MergeLayout { d_c, view_dims };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() {
            return Err(CoreError::config("merge layout needs at least one view".to_string()));
        }
        if let Some(&min) = self.view_dims.iter().min() {
            if self.d_c > min {
                return Err(CoreError::config(format!(
                    "d_c {} exceeds smallest view dim {}",
                    self.d_c, min
                )));
            }
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.d_c + self.view_dims.iter().map(|d| d - self.d_c).sum::<usize>()
    }
}

/// Whether merge uses the relaxed doubly stochastic matrices or the frozen
/// binarized permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    Soft,
    Hard,
}

/// Unrolled Sinkhorn-Knopp on the tape: exponentiate the logits (row
/// max-shifted; the shift cancels under row normalization so it can stay
/// off-gradient) and alternate row/column normalization until the row sums
/// settle or `max_iters` is reached.
pub fn sinkhorn_on_tape(tape: &mut Tape, logits: NodeId, cfg: &SinkhornConfig) -> Result<NodeId> {
    cfg.validate()?;
    let v = tape.value(logits);
    let d = v.rows();
    if v.cols() != d {
        return Err(CoreError::shape(format!(
            "sinkhorn: {}x{} not square",
            v.rows(),
            v.cols()
        )));
    }
    if !v.all_finite() {
        return Err(CoreError::numerical("sinkhorn: non-finite logit".to_string()));
    }
    let neg_row_max: Vec<f64> = (0..d)
        .map(|i| -v.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    let shift = tape.constant(Tensor::vector(neg_row_max));
    let shifted = tape.add_col_broadcast(logits, shift)?;
    let mut s = tape.exp(shifted);
    for _ in 0..cfg.max_iters {
        let rs = tape.row_sum(s);
        check_positive(tape.value(rs).data(), "row sum")?;
        s = tape.div_row_broadcast(s, rs)?;
        let cs = tape.col_sum(s);
        check_positive(tape.value(cs).data(), "column sum")?;
        s = tape.div_col_broadcast(s, cs)?;
        if ds_deviation(tape.value(s)) < cfg.convergence_tol {
            break;
        }
    }
    Ok(s)
}

/// Value-level Sinkhorn for callers without a live tape.
pub fn sinkhorn(logits: &Tensor, cfg: &SinkhornConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let id = tape.constant(logits.clone());
    let out = sinkhorn_on_tape(&mut tape, id, cfg)?;
    Ok(tape.value(out).clone())
}

fn check_positive(v: &[f64], what: &str) -> Result<()> {
    for &x in v {
        if !x.is_finite() || x <= 0.0 {
            return Err(CoreError::numerical(format!(
                "sinkhorn: non-positive {} ({:.3e})",
                what, x
            )));
        }
    }
    Ok(())
}

/// Largest deviation of any row or column sum from 1.
pub fn ds_deviation(b: &Tensor) -> f64 {
    let (n, m) = (b.rows(), b.cols());
    let d = b.data();
    let mut dev = 0.0_f64;
    for i in 0..n {
        let rs: f64 = d[i * m..(i + 1) * m].iter().sum();
        dev = dev.max((rs - 1.0).abs());
    }
    for j in 0..m {
        let cs: f64 = (0..n).map(|i| d[i * m + j]).sum();
        dev = dev.max((cs - 1.0).abs());
    }
    dev
}

/// Closest hard permutation to a doubly stochastic matrix: the argmax of
/// the Frobenius inner product over permutation matrices.
pub fn binarize(b: &Tensor) -> Result<Tensor> {
    let perm = binarize_permutation(b)?;
    let d = perm.len();
    let mut p = vec![0.0; d * d];
    for (i, &j) in perm.iter().enumerate() {
        p[i * d + j] = 1.0;
    }
    Tensor::matrix(d, d, p)
}

/// The permutation underlying [`binarize`], as a row-to-column map.
pub fn binarize_permutation(b: &Tensor) -> Result<Vec<usize>> {
    let (perm, _) = max_assignment(b)?;
    Ok(perm)
}

/// -sum B log B with 0 log 0 = 0; zero exactly on hard permutations.
pub fn entropy_penalty(b: &Tensor) -> f64 {
    b.data()
        .iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

/// Per-sample mean of the views' aligned common blocks, the closed-form
/// minimizer of the summed squared distances.
pub fn common_center(blocks: &[Tensor]) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(CoreError::config("common_center: no views".to_string()));
    }
    let shape = blocks[0].shape().to_vec();
    let mut acc = vec![0.0; blocks[0].numel()];
    for b in blocks {
        if b.shape() != shape.as_slice() {
            return Err(CoreError::shape(format!(
                "common_center: block shapes {:?} vs {:?}",
                shape,
                b.shape()
            )));
        }
        for (a, x) in acc.iter_mut().zip(b.data()) {
            *a += x;
        }
    }
    let v = blocks.len() as f64;
    for a in &mut acc {
        *a /= v;
    }
    Tensor::new(shape, acc)
}

fn aligned_views(
    tape: &mut Tape,
    encoded: &[NodeId],
    mats: &[NodeId],
    layout: &MergeLayout,
) -> Result<Vec<NodeId>> {
    if encoded.len() != layout.views() || mats.len() != layout.views() {
        return Err(CoreError::shape(format!(
            "merge: {} encodings, {} matrices, layout has {} views",
            encoded.len(),
            mats.len(),
            layout.views()
        )));
    }
    let mut aligned = Vec::with_capacity(encoded.len());
    for (v, (&e, &m)) in encoded.iter().zip(mats.iter()).enumerate() {
        let d_v = layout.view_dims[v];
        if tape.value(e).cols() != d_v {
            return Err(CoreError::shape(format!(
                "merge: view {} encoding width {} vs layout {}",
                v,
                tape.value(e).cols(),
                d_v
            )));
        }
        if tape.value(m).rows() != d_v || tape.value(m).cols() != d_v {
            return Err(CoreError::shape(format!(
                "merge: view {} alignment matrix {}x{} vs dim {}",
                v,
                tape.value(m).rows(),
                tape.value(m).cols(),
                d_v
            )));
        }
        // row vectors transform as z B^T
        let mt = tape.transpose(m);
        aligned.push(tape.matmul(e, mt)?);
    }
    Ok(aligned)
}

/// Assemble the complete latent batch: the common block followed by each
/// view's private span.
///
/// Callers pass soft (doubly stochastic, on-tape) matrices with
/// `MergeMode::Soft` or frozen binarized permutations with
/// `MergeMode::Hard`. Soft mode averages the common blocks across views;
/// hard mode takes the first view's block so every output coordinate is a
/// coordinate of exactly one view.
pub fn merge(
    tape: &mut Tape,
    encoded: &[NodeId],
    mats: &[NodeId],
    layout: &MergeLayout,
    mode: MergeMode,
) -> Result<NodeId> {
    layout.validate()?;
    let aligned = aligned_views(tape, encoded, mats, layout)?;
    let d_c = layout.d_c;
    let mut parts: Vec<NodeId> = Vec::new();
    if d_c > 0 {
        let commons: Result<Vec<NodeId>> = aligned
            .iter()
            .map(|&a| tape.slice_cols(a, 0, d_c))
            .collect();
        let commons = commons?;
        let center = match mode {
            MergeMode::Hard => commons[0],
            MergeMode::Soft => {
                let mut acc = commons[0];
                for &c in &commons[1..] {
                    acc = tape.add(acc, c)?;
                }
                tape.scale(acc, 1.0 / commons.len() as f64)
            }
        };
        parts.push(center);
    }
    for (v, &a) in aligned.iter().enumerate() {
        let d_v = layout.view_dims[v];
        if d_v > d_c {
            parts.push(tape.slice_cols(a, d_c, d_v)?);
        }
    }
    let out = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)?
    };
    debug_assert_eq!(tape.value(out).cols(), layout.total_dim());
    Ok(out)
}

/// Value-level merge for evaluation paths.
pub fn merge_value(
    encoded: &[Tensor],
    mats: &[Tensor],
    layout: &MergeLayout,
    mode: MergeMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e: Vec<NodeId> = encoded.iter().map(|t| tape.constant(t.clone())).collect();
    let m: Vec<NodeId> = mats.iter().map(|t| tape.constant(t.clone())).collect();
    let out = merge(&mut tape, &e, &m, layout, mode)?;
    Ok(tape.value(out).clone())
}

/// Transport-style alignment loss: each view's aligned common block is
/// pulled toward the (detached) cross-view mean center, plus the entropy
/// penalty on the alignment matrices. On hard permutations the entropy
/// term is exactly zero.
pub fn merge_loss(
    tape: &mut Tape,
    encoded: &[NodeId],
    mats: &[NodeId],
    layout: &MergeLayout,
    eta: f64,
) -> Result<NodeId> {
    layout.validate()?;
    let aligned = aligned_views(tape, encoded, mats, layout)?;
    let mut ent_acc: Option<NodeId> = None;
    for &m in mats {
        let e = tape.entropy_sum(m);
        ent_acc = Some(match ent_acc {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }
    let mut loss = tape.scale(ent_acc.expect("at least one view"), eta);
    let d_c = layout.d_c;
    if d_c > 0 {
        let commons: Result<Vec<NodeId>> = aligned
            .iter()
            .map(|&a| tape.slice_cols(a, 0, d_c))
            .collect();
        let commons = commons?;
        let n = tape.value(commons[0]).rows();
        let blocks: Vec<Tensor> = commons.iter().map(|&c| tape.value(c).clone()).collect();
        let center = tape.constant(common_center(&blocks)?);
        for &c in &commons {
            let diff = tape.sub(c, center)?;
            let sq = tape.mul_elem(diff, diff)?;
            let ssum = tape.sum(sq);
            let term = tape.scale(ssum, 1.0 / n as f64);
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}
