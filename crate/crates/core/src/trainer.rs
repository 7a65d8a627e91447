//! Alternating optimization: contrastive steps train encoders and the
//! transition, permutation steps train alignment logits, adversary steps
//! train the discriminator. Also owns validation evaluation and traces.

use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::align::{self, MergeLayout, MergeMode, SinkhornConfig};
use crate::dataset::ViewDataset;
use crate::error::{CoreError, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    channel_permutation, AlignmentMatrices, BoundMlp, ConcatProjection, EncoderStack,
    NoiseDiscriminator, TransitionModel,
};
use crate::synthgen::stream_rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const STREAM_TRAIN: u64 = 10;
pub const STREAM_INIT: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    Full,
    /// Positives come from the next time step; the parametric transition,
    /// residual loss, and discriminator are inactive.
    NoTransition,
    /// View encodings are concatenated and linearly projected; no
    /// alignment learning.
    NoPermutation,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub contrastive: usize,
    pub permutation: usize,
    pub discriminator: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            contrastive: 10,
            permutation: 5,
            discriminator: 1,
        }
    }
}

impl PhaseSchedule {
    pub fn cycle_len(&self) -> usize {
        self.contrastive + self.permutation + self.discriminator
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate once per epoch past
    /// `lr_decay_start_epoch`; 1.0 keeps it constant.
    pub lr_decay_per_epoch: f64,
    pub lr_decay_start_epoch: usize,
    pub schedule: PhaseSchedule,
    pub seed: u64,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    pub shd_threshold: f64,
    pub variant: TrainVariant,
    /// When set, the merge loss enters the contrastive total as a plain
    /// value and sends no gradients to the encoders.
    pub detach_merge_in_contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 2400,
            learning_rate: 0.001,
            lr_decay_per_epoch: 1.0,
            lr_decay_start_epoch: 0,
            schedule: PhaseSchedule::default(),
            seed: 0,
            loss: LossConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            eval_every: 10,
            shd_threshold: 0.1,
            variant: TrainVariant::Full,
            detach_merge_in_contrastive: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during the given epoch (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decayed = epoch.saturating_sub(self.lr_decay_start_epoch);
        self.learning_rate * self.lr_decay_per_epoch.powi(decayed as i32)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoreError::config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(CoreError::config(format!(
                "lr_decay_per_epoch must be in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        let s = self.schedule;
        if s.contrastive < 1 || s.permutation < 1 || s.discriminator < 1 {
            return Err(CoreError::config(format!(
                "phase cycle lengths must all be >= 1, got {}/{}/{}",
                s.contrastive, s.permutation, s.discriminator
            )));
        }
        if self.eval_every < 1 {
            return Err(CoreError::config("eval_every must be >= 1".to_string()));
        }
        if !(self.shd_threshold > 0.0) {
            return Err(CoreError::config(format!(
                "shd_threshold must be > 0, got {}",
                self.shd_threshold
            )));
        }
        self.loss.validate()?;
        self.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Contrastive,
    Permutation,
    Discriminator,
}

/// Which phase a cycle position falls in; variants without a given phase
/// spend those steps on contrastive learning instead.
pub fn phase_of(cycle_pos: usize, schedule: &PhaseSchedule, variant: TrainVariant) -> Phase {
    let raw = if cycle_pos < schedule.contrastive {
        Phase::Contrastive
    } else if cycle_pos < schedule.contrastive + schedule.permutation {
        Phase::Permutation
    } else {
        Phase::Discriminator
    };
    match (variant, raw) {
        (TrainVariant::NoPermutation, Phase::Permutation) => Phase::Contrastive,
        (TrainVariant::NoTransition, Phase::Discriminator) => Phase::Contrastive,
        (_, p) => p,
    }
}

/// One minibatch of anchor rows plus their lag windows, all as flat row
/// indices into the dataset matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub anchor_rows: Vec<usize>,
    /// `lag_rows[tau-1]` holds each anchor's row at lag tau.
    pub lag_rows: Vec<Vec<usize>>,
    /// Next-step rows when adjacent positives are needed.
    pub next_rows: Option<Vec<usize>>,
}

pub struct BatchSampler {
    pairs: Vec<(usize, usize)>,
    scratch: Vec<(usize, usize)>,
    batch_size: usize,
    lags: usize,
    seq_len: usize,
    need_next: bool,
}

impl BatchSampler {
    pub fn new(
        ds: &ViewDataset,
        seqs: &[usize],
        batch_size: usize,
        need_next: bool,
    ) -> Result<Self> {
        let lags = ds.spec.lags;
        let seq_len = ds.spec.seq_len;
        let t_hi = if need_next { seq_len - 1 } else { seq_len };
        if t_hi <= lags {
            return Err(CoreError::config(format!(
                "no valid time steps: seq_len {} lags {} need_next {}",
                seq_len, lags, need_next
            )));
        }
        let mut pairs = Vec::with_capacity(seqs.len() * (t_hi - lags));
        for &s in seqs {
            for t in lags..t_hi {
                pairs.push((s, t));
            }
        }
        if batch_size > pairs.len() {
            return Err(CoreError::config(format!(
                "batch_size {} exceeds {} available (sequence, time) pairs",
                batch_size,
                pairs.len()
            )));
        }
        Ok(BatchSampler {
            scratch: pairs.clone(),
            pairs,
            batch_size,
            lags,
            seq_len,
            need_next,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Distinct uniform (sequence, t) pairs via a partial shuffle of the
    /// canonical pair list; all randomness lives in `rng`.
    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> Batch {
        self.scratch.copy_from_slice(&self.pairs);
        let n = self.scratch.len();
        for i in 0..self.batch_size {
            let j = rng.random_range(i..n);
            self.scratch.swap(i, j);
        }
        let mut anchor_rows = Vec::with_capacity(self.batch_size);
        let mut lag_rows = vec![Vec::with_capacity(self.batch_size); self.lags];
        let mut next_rows = self.need_next.then(|| Vec::with_capacity(self.batch_size));
        for &(s, t) in &self.scratch[..self.batch_size] {
            let base = s * self.seq_len;
            anchor_rows.push(base + t);
            for tau in 1..=self.lags {
                lag_rows[tau - 1].push(base + t - tau);
            }
            if let Some(next) = next_rows.as_mut() {
                next.push(base + t + 1);
            }
        }
        Batch {
            anchor_rows,
            lag_rows,
            next_rows,
        }
    }
}

/// All trainable components of one run.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub encoders: EncoderStack,
    pub transition: TransitionModel,
    pub alignment: AlignmentMatrices,
    pub discriminator: NoiseDiscriminator,
    pub projection: Option<ConcatProjection>,
    pub layout: MergeLayout,
}

impl ModelBundle {
    pub fn init(ds: &ViewDataset, variant: TrainVariant, seed: u64) -> Result<Self> {
        let latent_dims = ds.view_dims();
        let obs_dims: Vec<usize> = ds.observations.iter().map(|o| o.cols()).collect();
        let layout = MergeLayout::new(ds.d_c, latent_dims.clone())?;
        let d_total = layout.total_dim();
        let mut rng = stream_rng(seed, STREAM_INIT);
        let encoders = EncoderStack::new(&obs_dims, &latent_dims, &mut rng)?;
        let transition = TransitionModel::new_random(d_total, ds.spec.lags, &mut rng);
        let alignment = AlignmentMatrices::new_random(&latent_dims, &mut rng);
        let discriminator = NoiseDiscriminator::new(d_total, &mut rng);
        let projection = (variant == TrainVariant::NoPermutation).then(|| {
            let d_sum: usize = latent_dims.iter().sum();
            ConcatProjection::new(d_sum, d_total, &mut rng)
        });
        Ok(ModelBundle {
            encoders,
            transition,
            alignment,
            discriminator,
            projection,
            layout,
        })
    }

    pub fn d_total(&self) -> usize {
        self.layout.total_dim()
    }
}

/// Everything that evolves during training; checkpoints capture it whole.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub bundle: ModelBundle,
    pub adam_encoders: AdamState,
    pub adam_transition: AdamState,
    pub adam_alignment: AdamState,
    pub adam_discriminator: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub cycle_pos: usize,
    pub best_mcc: f64,
}

impl TrainerState {
    pub fn init(ds: &ViewDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::init(ds, cfg.variant, cfg.seed)?;
        Ok(TrainerState {
            bundle,
            adam_encoders: AdamState::new(cfg.learning_rate),
            adam_transition: AdamState::new(cfg.learning_rate),
            adam_alignment: AdamState::new(cfg.learning_rate),
            adam_discriminator: AdamState::new(cfg.learning_rate),
            rng: stream_rng(cfg.seed, STREAM_TRAIN),
            epoch: 0,
            cycle_pos: 0,
            best_mcc: f64::NEG_INFINITY,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub l_contr: f64,
    pub l_m: f64,
    pub l_eps: f64,
    pub l_d: f64,
    pub total: f64,
}

fn encode_rows(
    tape: &mut Tape,
    bound: &[BoundMlp],
    ds: &ViewDataset,
    rows: &[usize],
) -> Result<Vec<NodeId>> {
    bound
        .iter()
        .enumerate()
        .map(|(v, b)| {
            let x = tape.constant(ds.observations[v].gather_rows(rows));
            b.forward(tape, x)
        })
        .collect()
}

enum MergeHead {
    Aligned(Vec<NodeId>),
    Projected(NodeId),
}

fn merge_head(
    tape: &mut Tape,
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    projection_trainable: bool,
) -> Result<MergeHead> {
    match &bundle.projection {
        Some(p) => Ok(MergeHead::Projected(p.bind(tape, projection_trainable))),
        None => {
            let perms = bundle.alignment.permutations(&cfg.sinkhorn)?;
            Ok(MergeHead::Aligned(
                perms.into_iter().map(|p| tape.constant(p)).collect(),
            ))
        }
    }
}

fn merge_with_head(
    tape: &mut Tape,
    head: &MergeHead,
    encoded: &[NodeId],
    layout: &MergeLayout,
) -> Result<NodeId> {
    match head {
        MergeHead::Aligned(mats) => align::merge(tape, encoded, mats, layout, MergeMode::Hard),
        MergeHead::Projected(w) => {
            let cat = tape.concat_cols(encoded)?;
            ConcatProjection::forward(tape, *w, cat)
        }
    }
}

fn check_finite(name: &str, v: f64, epoch: usize, parts: &StepLosses) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(CoreError::numerical(format!(
        "non-finite {} at epoch {}: l_contr={} l_m={} l_eps={} l_d={} total={}",
        name, epoch, parts.l_contr, parts.l_m, parts.l_eps, parts.l_d, parts.total
    )))
}

/// Contrastive-phase step: gradients to encoders, transition, and the
/// projection head when present; alignment stays frozen at the current
/// binarized permutations.
pub fn train_step_contrastive(
    state: &mut TrainerState,
    ds: &ViewDataset,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound_enc = state.bundle.encoders.bind(&mut tape, true);
    let head = merge_head(&mut tape, &state.bundle, cfg, true)?;
    let layout = state.bundle.layout.clone();

    let enc_anchor = encode_rows(&mut tape, &bound_enc, ds, &batch.anchor_rows)?;
    let merged_anchor = merge_with_head(&mut tape, &head, &enc_anchor, &layout)?;

    // merge-consistency loss on the anchor encodings
    let l_m_id = match (&head, cfg.detach_merge_in_contrastive) {
        (MergeHead::Projected(_), _) => tape.constant(Tensor::scalar(0.0)),
        (MergeHead::Aligned(mats), false) => align::merge_loss(
            &mut tape,
            &enc_anchor,
            mats,
            &layout,
            cfg.sinkhorn.entropy_weight,
        )?,
        (MergeHead::Aligned(mats), true) => {
            let enc_vals: Vec<Tensor> = enc_anchor.iter().map(|&e| tape.value(e).clone()).collect();
            let mat_vals: Vec<Tensor> = mats.iter().map(|&m| tape.value(m).clone()).collect();
            let mut scratch = Tape::new();
            let e: Vec<NodeId> = enc_vals.into_iter().map(|t| scratch.constant(t)).collect();
            let m: Vec<NodeId> = mat_vals.into_iter().map(|t| scratch.constant(t)).collect();
            let v = align::merge_loss(&mut scratch, &e, &m, &layout, cfg.sinkhorn.entropy_weight)?;
            let val = scratch.value(v).item();
            tape.constant(Tensor::scalar(val))
        }
    };

    let mut trans_ids: Vec<NodeId> = Vec::new();
    let (positive, l_eps_id, l_d_id) = match cfg.variant {
        TrainVariant::NoTransition => {
            let next = batch
                .next_rows
                .as_ref()
                .ok_or_else(|| CoreError::config("adjacent positives need next rows".to_string()))?;
            let enc_next = encode_rows(&mut tape, &bound_enc, ds, next)?;
            let merged_next = merge_with_head(&mut tape, &head, &enc_next, &layout)?;
            let zero_a = tape.constant(Tensor::scalar(0.0));
            let zero_b = tape.constant(Tensor::scalar(0.0));
            (merged_next, zero_a, zero_b)
        }
        _ => {
            let bound_trans = state.bundle.transition.bind(&mut tape, true);
            trans_ids = bound_trans.mat_ids.clone();
            let mut merged_lags = Vec::with_capacity(batch.lag_rows.len());
            for rows in &batch.lag_rows {
                let enc = encode_rows(&mut tape, &bound_enc, ds, rows)?;
                merged_lags.push(merge_with_head(&mut tape, &head, &enc, &layout)?);
            }
            let predicted = bound_trans.transit(&mut tape, &merged_lags)?;
            let per_row = tape.elementwise_metric(merged_anchor, predicted, cfg.loss.metric)?;
            let l_eps = tape.mean(per_row);

            let eps_hat = tape.sub(merged_anchor, predicted)?;
            let n = batch.anchor_rows.len();
            let perms = channel_permutation(n, state.bundle.d_total(), &mut state.rng);
            let eps_perm = tape.shuffle_rows_per_column(eps_hat, perms)?;
            let bound_disc = state.bundle.discriminator.bind(&mut tape, false);
            let logits_real = bound_disc.forward(&mut tape, eps_hat)?;
            let logits_perm = bound_disc.forward(&mut tape, eps_perm)?;
            let l_d = losses::discriminator_loss_model_paired(&mut tape, logits_real, logits_perm);
            (predicted, l_eps, l_d)
        }
    };

    let l_contr = losses::contrastive_loss_in_batch(&mut tape, merged_anchor, positive, &cfg.loss)?;
    let total = losses::total_loss(&mut tape, l_contr, l_m_id, l_eps_id, l_d_id, &cfg.loss)?;

    let parts = StepLosses {
        l_contr: tape.value(l_contr).item(),
        l_m: tape.value(l_m_id).item(),
        l_eps: tape.value(l_eps_id).item(),
        l_d: tape.value(l_d_id).item(),
        total: tape.value(total).item(),
    };
    check_finite("loss", parts.total, state.epoch, &parts)?;
    tape.backward(total)?;

    let mut enc_ids: Vec<NodeId> = bound_enc.iter().flat_map(|b| b.param_ids()).collect();
    if let MergeHead::Projected(w) = &head {
        enc_ids.push(*w);
    }
    let enc_grads: Vec<Option<&[f64]>> = enc_ids.iter().map(|&id| tape.grad(id)).collect();
    let ModelBundle {
        encoders,
        projection,
        transition,
        ..
    } = &mut state.bundle;
    let mut enc_params = encoders.params_mut();
    if let Some(p) = projection {
        enc_params.extend(p.params_mut());
    }
    state.adam_encoders.adam_step(&mut enc_params, &enc_grads)?;

    if !trans_ids.is_empty() {
        let trans_grads: Vec<Option<&[f64]>> = trans_ids.iter().map(|&id| tape.grad(id)).collect();
        let mut trans_params = transition.params_mut();
        state
            .adam_transition
            .adam_step(&mut trans_params, &trans_grads)?;
    }
    Ok(parts)
}

/// Permutation-phase step: encoders and transition frozen, gradients
/// reach only the alignment logits through the unrolled Sinkhorn.
pub fn train_step_permutation(
    state: &mut TrainerState,
    ds: &ViewDataset,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound_enc = state.bundle.encoders.bind(&mut tape, false);
    let enc_anchor = encode_rows(&mut tape, &bound_enc, ds, &batch.anchor_rows)?;
    let (logit_ids, ds_ids) =
        state
            .bundle
            .alignment
            .bind_doubly_stochastic(&mut tape, &cfg.sinkhorn, true)?;
    let layout = state.bundle.layout.clone();
    let l_m = align::merge_loss(
        &mut tape,
        &enc_anchor,
        &ds_ids,
        &layout,
        cfg.sinkhorn.entropy_weight,
    )?;
    let parts = StepLosses {
        l_m: tape.value(l_m).item(),
        ..Default::default()
    };
    check_finite("merge loss", parts.l_m, state.epoch, &parts)?;
    tape.backward(l_m)?;
    let grads: Vec<Option<&[f64]>> = logit_ids.iter().map(|&id| tape.grad(id)).collect();
    let mut params = state.bundle.alignment.params_mut();
    state.adam_alignment.adam_step(&mut params, &grads)?;
    Ok(parts)
}

/// Discriminator-phase step: only the discriminator learns, on the
/// adversary objective over current residuals and their channel shuffle.
pub fn train_step_discriminator(
    state: &mut TrainerState,
    ds: &ViewDataset,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound_enc = state.bundle.encoders.bind(&mut tape, false);
    let head = merge_head(&mut tape, &state.bundle, cfg, false)?;
    let layout = state.bundle.layout.clone();
    let enc_anchor = encode_rows(&mut tape, &bound_enc, ds, &batch.anchor_rows)?;
    let merged_anchor = merge_with_head(&mut tape, &head, &enc_anchor, &layout)?;
    let bound_trans = state.bundle.transition.bind(&mut tape, false);
    let mut merged_lags = Vec::with_capacity(batch.lag_rows.len());
    for rows in &batch.lag_rows {
        let enc = encode_rows(&mut tape, &bound_enc, ds, rows)?;
        merged_lags.push(merge_with_head(&mut tape, &head, &enc, &layout)?);
    }
    let eps_hat = bound_trans.residual_noise(&mut tape, merged_anchor, &merged_lags)?;
    let n = batch.anchor_rows.len();
    let perms = channel_permutation(n, state.bundle.d_total(), &mut state.rng);
    let eps_perm = tape.shuffle_rows_per_column(eps_hat, perms)?;
    let bound_disc = state.bundle.discriminator.bind(&mut tape, true);
    let logits_real = bound_disc.forward(&mut tape, eps_hat)?;
    let logits_perm = bound_disc.forward(&mut tape, eps_perm)?;
    let l_d = losses::discriminator_loss_adversary(&mut tape, logits_real, logits_perm);
    let parts = StepLosses {
        l_d: tape.value(l_d).item(),
        ..Default::default()
    };
    check_finite("adversary loss", parts.l_d, state.epoch, &parts)?;
    tape.backward(l_d)?;
    let ids = bound_disc.param_ids();
    let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
    let mut params = state.bundle.discriminator.params_mut();
    state.adam_discriminator.adam_step(&mut params, &grads)?;
    Ok(parts)
}

/// Merged latent estimates for the given rows, hard alignment.
pub fn merged_estimate(
    bundle: &ModelBundle,
    ds: &ViewDataset,
    rows: &[usize],
    sinkhorn: &SinkhornConfig,
) -> Result<Tensor> {
    let gathered: Vec<Tensor> = ds
        .observations
        .iter()
        .map(|o| o.gather_rows(rows))
        .collect();
    let encoded = bundle.encoders.encode_all(&gathered)?;
    match &bundle.projection {
        Some(p) => {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = encoded.into_iter().map(|e| tape.constant(e)).collect();
            let cat = tape.concat_cols(&ids)?;
            let w = tape.constant(p.weight.clone());
            let wt = tape.transpose(w);
            let out = tape.matmul(cat, wt)?;
            Ok(tape.value(out).clone())
        }
        None => {
            let perms = bundle.alignment.permutations(sinkhorn)?;
            align::merge_value(&encoded, &perms, &bundle.layout, MergeMode::Hard)
        }
    }
}

/// Validation metrics for a bundle on the given rows: MCC and R^2 of the
/// merged estimates against ground truth, SHD of the transition supports.
pub fn evaluate(
    bundle: &ModelBundle,
    ds: &ViewDataset,
    rows: &[usize],
    sinkhorn: &SinkhornConfig,
    shd_threshold: f64,
) -> Result<MetricsReport> {
    let est = merged_estimate(bundle, ds, rows, sinkhorn)?;
    let truth = ds.z.gather_rows(rows);
    let mcc_out = metrics::mcc(&est, &truth)?;
    let r2 = metrics::r_squared(&est, &truth)?;
    let d = ds.spec.d;
    let max_shd = d * d * ds.spec.lags;
    let shd = match metrics::channel_scales(&est, &truth, &mcc_out.assignment) {
        Ok(scales) => metrics::shd(
            &bundle.transition.mats,
            &ds.transition,
            &mcc_out.assignment,
            &scales,
            shd_threshold,
        )
        .unwrap_or(max_shd),
        Err(_) => {
            eprintln!("warning: degenerate channel scales, reporting worst-case shd");
            max_shd
        }
    };
    Ok(MetricsReport {
        mcc: mcc_out.score,
        r2: r2.mean,
        shd,
        correlation: mcc_out.correlation,
        assignment: mcc_out.assignment,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub l_contr: f64,
    pub l_m: f64,
    pub l_eps: f64,
    pub l_d: f64,
    pub mcc: f64,
    pub r2: f64,
    pub shd: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,l_contr,l_m,l_eps,l_d,mcc,r2,shd,seconds")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, r.l_contr, r.l_m, r.l_eps, r.l_d, r.mcc, r.r2, r.shd, r.seconds
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub report: MetricsReport,
    pub bundle: ModelBundle,
}

pub struct TrainOutcome {
    pub state: TrainerState,
    pub trace: TrainTrace,
    pub best: Option<BestModel>,
}

pub fn run_training(
    ds: &ViewDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let state = TrainerState::init(ds, cfg)?;
    continue_training(state, ds, cfg, out_dir, TrainTrace::default())
}

#[allow(clippy::too_many_arguments)]
fn record_eval(
    state: &mut TrainerState,
    ds: &ViewDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    trace: &mut TrainTrace,
    best: &mut Option<BestModel>,
    val_rows: &[usize],
    losses: StepLosses,
    seconds: f64,
) -> Result<()> {
    let report = evaluate(
        &state.bundle,
        ds,
        val_rows,
        &cfg.sinkhorn,
        cfg.shd_threshold,
    )?;
    trace.records.push(TraceRecord {
        epoch: state.epoch,
        l_contr: losses.l_contr,
        l_m: losses.l_m,
        l_eps: losses.l_eps,
        l_d: losses.l_d,
        mcc: report.mcc,
        r2: report.r2,
        shd: report.shd,
        seconds,
    });
    if let Some(dir) = out_dir {
        trace.write_csv(&dir.join("trace.csv"))?;
    }
    if report.mcc > state.best_mcc {
        state.best_mcc = report.mcc;
        *best = Some(BestModel {
            epoch: state.epoch,
            report,
            bundle: state.bundle.clone(),
        });
        if let Some(dir) = out_dir {
            crate::checkpoint::write_checkpoint(state, cfg, &dir.join("best.mvck"))?;
        }
    }
    Ok(())
}

/// Resume (or start) the epoch loop from an existing state. Evaluation
/// happens every `eval_every` epochs and at the end; the best-MCC and
/// final states are checkpointed when `out_dir` is given.
pub fn continue_training(
    mut state: TrainerState,
    ds: &ViewDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut trace: TrainTrace,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_seqs, val_seqs) = ds.split_sequences();
    let val_rows: Vec<usize> = val_seqs
        .iter()
        .flat_map(|&s| (0..ds.spec.seq_len).map(move |t| s * ds.spec.seq_len + t))
        .collect();
    let need_next = cfg.variant == TrainVariant::NoTransition;
    let mut sampler = BatchSampler::new(ds, &train_seqs, cfg.batch_size, need_next)?;
    let steps_per_epoch = (sampler.n_pairs() / cfg.batch_size).max(1);
    let cycle_len = cfg.schedule.cycle_len();
    let started = Instant::now();
    let mut best: Option<BestModel> = None;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    // initialization eval point; resumed runs already have theirs
    if state.epoch == 0 {
        let seconds = started.elapsed().as_secs_f64();
        record_eval(
            &mut state,
            ds,
            cfg,
            out_dir,
            &mut trace,
            &mut best,
            &val_rows,
            StepLosses::default(),
            seconds,
        )?;
    }

    let mut win = StepLosses::default();
    let mut win_n = 0usize;
    while state.epoch < cfg.epochs {
        let lr = cfg.lr_at_epoch(state.epoch);
        state.adam_encoders.learning_rate = lr;
        state.adam_transition.learning_rate = lr;
        state.adam_alignment.learning_rate = lr;
        state.adam_discriminator.learning_rate = lr;
        for _ in 0..steps_per_epoch {
            let phase = phase_of(state.cycle_pos, &cfg.schedule, cfg.variant);
            let batch = sampler.sample(&mut state.rng);
            match phase {
                Phase::Contrastive => {
                    let parts = train_step_contrastive(&mut state, ds, cfg, &batch)?;
                    win.l_contr += parts.l_contr;
                    win.l_m += parts.l_m;
                    win.l_eps += parts.l_eps;
                    win.l_d += parts.l_d;
                    win_n += 1;
                }
                Phase::Permutation => {
                    train_step_permutation(&mut state, ds, cfg, &batch)?;
                }
                Phase::Discriminator => {
                    train_step_discriminator(&mut state, ds, cfg, &batch)?;
                }
            }
            state.cycle_pos = (state.cycle_pos + 1) % cycle_len;
        }
        state.epoch += 1;

        let at_eval = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        if at_eval {
            let denom = win_n.max(1) as f64;
            let means = StepLosses {
                l_contr: win.l_contr / denom,
                l_m: win.l_m / denom,
                l_eps: win.l_eps / denom,
                l_d: win.l_d / denom,
                total: win.total / denom,
            };
            let seconds = started.elapsed().as_secs_f64();
            record_eval(
                &mut state,
                ds,
                cfg,
                out_dir,
                &mut trace,
                &mut best,
                &val_rows,
                means,
                seconds,
            )?;
            win = StepLosses::default();
            win_n = 0;
        }
    }
    if let Some(dir) = out_dir {
        crate::checkpoint::write_checkpoint(&state, cfg, &dir.join("final.mvck"))?;
        trace.write_csv(&dir.join("trace.csv"))?;
    }
    Ok(TrainOutcome { state, trace, best })
}

/// Debug upper bound: fit encoders (and projection) to the ground-truth
/// latents by mean squared error through the frozen merge; everything the
/// unsupervised path can in principle reach.
pub fn run_supervised(ds: &ViewDataset, cfg: &TrainConfig) -> Result<(ModelBundle, MetricsReport)> {
    cfg.validate()?;
    let mut state = TrainerState::init(ds, cfg)?;
    let (train_seqs, val_seqs) = ds.split_sequences();
    let val_rows: Vec<usize> = val_seqs
        .iter()
        .flat_map(|&s| (0..ds.spec.seq_len).map(move |t| s * ds.spec.seq_len + t))
        .collect();
    let mut sampler = BatchSampler::new(ds, &train_seqs, cfg.batch_size, false)?;
    let steps_per_epoch = (sampler.n_pairs() / cfg.batch_size).max(1);
    // Merged slot k carries true channel slot_channels[k]: the common core
    // first, then each view's private channels in view order. The target
    // must follow that order or slots would chase channels their view
    // never observes.
    let slot_channels: Vec<usize> = {
        let mut order: Vec<usize> = ds.index_sets[0][..ds.d_c].to_vec();
        for set in &ds.index_sets {
            order.extend_from_slice(&set[ds.d_c..]);
        }
        order
    };
    for _ in 0..cfg.epochs {
        state.adam_encoders.learning_rate = cfg.lr_at_epoch(state.epoch);
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample(&mut state.rng);
            let mut tape = Tape::new();
            let bound_enc = state.bundle.encoders.bind(&mut tape, true);
            let head = merge_head(&mut tape, &state.bundle, cfg, true)?;
            let layout = state.bundle.layout.clone();
            let enc = encode_rows(&mut tape, &bound_enc, ds, &batch.anchor_rows)?;
            let merged = merge_with_head(&mut tape, &head, &enc, &layout)?;
            let z_rows = ds.z.gather_rows(&batch.anchor_rows);
            let n = batch.anchor_rows.len();
            let d = slot_channels.len();
            let mut reordered = vec![0.0; n * d];
            for r in 0..n {
                for (k, &ch) in slot_channels.iter().enumerate() {
                    reordered[r * d + k] = z_rows.at(r, ch);
                }
            }
            let truth = tape.constant(Tensor::matrix(n, d, reordered)?);
            let diff = tape.sub(merged, truth)?;
            let sq = tape.mul_elem(diff, diff)?;
            let loss = tape.mean(sq);
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(CoreError::numerical(format!(
                    "non-finite supervised loss at epoch {}",
                    state.epoch
                )));
            }
            tape.backward(loss)?;
            let mut ids: Vec<NodeId> = bound_enc.iter().flat_map(|b| b.param_ids()).collect();
            if let MergeHead::Projected(w) = &head {
                ids.push(*w);
            }
            let grads: Vec<Option<&[f64]>> = ids.iter().map(|&id| tape.grad(id)).collect();
            let ModelBundle {
                encoders,
                projection,
                ..
            } = &mut state.bundle;
            let mut params = encoders.params_mut();
            if let Some(p) = projection {
                params.extend(p.params_mut());
            }
            state.adam_encoders.adam_step(&mut params, &grads)?;
        }
        state.epoch += 1;
    }
    let report = evaluate(
        &state.bundle,
        ds,
        &val_rows,
        &cfg.sinkhorn,
        cfg.shd_threshold,
    )?;
    Ok((state.bundle, report))
}
