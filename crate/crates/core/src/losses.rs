//! Training objectives: contrastive identification, merge consistency is
//! in `align`, residual minimization, discriminator scores, and the
//! weighted total.

use crate::error::{CoreError, Result};
use crate::model::BoundTransition;
use crate::tape::{Metric, NodeId, Tape};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive objective.
    pub temperature: f64,
    pub metric: Metric,
    /// Weight on the merge-consistency loss.
    pub beta_merge: f64,
    /// Weight on the residual loss.
    pub beta_residual: f64,
    /// Weight on the discriminator score fed back into the model.
    pub beta_disc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.0,
            metric: Metric::L1,
            beta_merge: 0.01,
            beta_residual: 0.01,
            beta_disc: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoreError::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        for (name, b) in [
            ("beta_merge", self.beta_merge),
            ("beta_residual", self.beta_residual),
            ("beta_disc", self.beta_disc),
        ] {
            if !(b >= 0.0) {
                return Err(CoreError::config(format!("{} must be >= 0, got {}", name, b)));
            }
        }
        Ok(())
    }
}

/// InfoNCE with an explicit negative pool shared across the batch:
/// -log[ e^{-d(a,p)/mu} / (e^{-d(a,p)/mu} + sum_i e^{-d(a,n_i)/mu}) ],
/// averaged over anchor rows.
pub fn contrastive_loss_with_negatives(
    tape: &mut Tape,
    anchor: NodeId,
    positive: NodeId,
    negatives: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if tape.value(negatives).rows() == 0 {
        return Err(CoreError::config(
            "contrastive loss needs at least one negative".to_string(),
        ));
    }
    let inv = -1.0 / cfg.temperature;
    let pos = tape.elementwise_metric(anchor, positive, cfg.metric)?;
    let pos_logit = tape.scale(pos, inv);
    let neg_logits = tape.pairwise_metric(anchor, negatives, cfg.metric, inv, false)?;
    finish_contrastive(tape, pos_logit, neg_logits)
}

/// InfoNCE with in-batch negatives: every other anchor row serves as a
/// negative, so M = batch - 1.
pub fn contrastive_loss_in_batch(
    tape: &mut Tape,
    anchor: NodeId,
    positive: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if tape.value(anchor).rows() < 2 {
        return Err(CoreError::config(
            "in-batch negatives need batch size >= 2".to_string(),
        ));
    }
    let inv = -1.0 / cfg.temperature;
    let pos = tape.elementwise_metric(anchor, positive, cfg.metric)?;
    let pos_logit = tape.scale(pos, inv);
    let neg_logits = tape.pairwise_metric(anchor, anchor, cfg.metric, inv, true)?;
    finish_contrastive(tape, pos_logit, neg_logits)
}

fn finish_contrastive(tape: &mut Tape, pos_logit: NodeId, neg_logits: NodeId) -> Result<NodeId> {
    let all = tape.concat_cols(&[pos_logit, neg_logits])?;
    let lse = tape.logsumexp_rows(all);
    let per_row = tape.sub(lse, pos_logit)?;
    Ok(tape.mean(per_row))
}

/// Mean prediction-error metric of the causal transition on a batch.
pub fn residual_loss(
    tape: &mut Tape,
    transition: &BoundTransition,
    z_t: NodeId,
    lagged: &[NodeId],
    metric: Metric,
) -> Result<NodeId> {
    let pred = transition.transit(tape, lagged)?;
    let per_row = tape.elementwise_metric(z_t, pred, metric)?;
    Ok(tape.mean(per_row))
}

/// Clamped sigmoid probabilities from raw logits.
pub fn discriminator_probability(tape: &mut Tape, logits: NodeId) -> NodeId {
    let p = tape.sigmoid(logits);
    tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Model-side discriminator score exactly as the objective writes it:
/// E[log D(eps) - log(1 - D(eps))], both terms on the real residual
/// batch. The channel-shuffled batch does not enter this form.
pub fn discriminator_loss_model(tape: &mut Tape, logits_real: NodeId) -> NodeId {
    let p = discriminator_probability(tape, logits_real);
    let lp = tape.ln(p);
    let one_minus = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let lq = tape.ln(one_minus);
    let diff = tape.sub(lp, lq).expect("same shape");
    tape.mean(diff)
}

/// Model-side score in the alternating scheme's pairing:
/// E[log D(eps) - log(1 - D(eps_shuffled))]. This is the form the
/// trainer feeds back into the encoder and transition.
pub fn discriminator_loss_model_paired(
    tape: &mut Tape,
    logits_real: NodeId,
    logits_perm: NodeId,
) -> NodeId {
    let p = discriminator_probability(tape, logits_real);
    let lp = tape.ln(p);
    let q = discriminator_probability(tape, logits_perm);
    let one_minus = tape.scale(q, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let lq = tape.ln(one_minus);
    let diff = tape.sub(lp, lq).expect("same shape");
    tape.mean(diff)
}

/// Adversary objective minimized over the discriminator parameters only:
/// E[log D(eps) + log(1 - D(eps_shuffled))]. Under this sign convention
/// the discriminator learns to score real residuals low.
pub fn discriminator_loss_adversary(
    tape: &mut Tape,
    logits_real: NodeId,
    logits_perm: NodeId,
) -> NodeId {
    let p = discriminator_probability(tape, logits_real);
    let lp = tape.ln(p);
    let q = discriminator_probability(tape, logits_perm);
    let one_minus = tape.scale(q, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let lq = tape.ln(one_minus);
    let s = tape.add(lp, lq).expect("same shape");
    tape.mean(s)
}

/// l_contr + b1 l_m + b2 l_eps + b3 l_d.
pub fn total_loss(
    tape: &mut Tape,
    l_contr: NodeId,
    l_m: NodeId,
    l_eps: NodeId,
    l_d: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let m = tape.scale(l_m, cfg.beta_merge);
    let e = tape.scale(l_eps, cfg.beta_residual);
    let d = tape.scale(l_d, cfg.beta_disc);
    let a = tape.add(l_contr, m)?;
    let b = tape.add(a, e)?;
    tape.add(b, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransitionModel;
    use crate::synthgen::{sample_standard_normal, stream_rng};
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn cfg_l1() -> LossConfig {
        LossConfig::default()
    }

    fn scalar_of(tape: &Tape, id: NodeId) -> f64 {
        tape.value(id).item()
    }

    #[test]
    fn contrastive_uniform_distances_log_m_plus_one() {
        let mut tape = Tape::new();
        let anchor = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let positive = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let negatives = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let l =
            contrastive_loss_with_negatives(&mut tape, anchor, positive, negatives, &cfg_l1())
                .unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn contrastive_perfect_separation_near_zero() {
        let mut tape = Tape::new();
        let anchor = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let positive = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let negatives = tape.constant(Tensor::matrix(2, 1, vec![200.0, 300.0]).unwrap());
        let l =
            contrastive_loss_with_negatives(&mut tape, anchor, positive, negatives, &cfg_l1())
                .unwrap();
        assert!(scalar_of(&tape, l) < 1e-12);
    }

    #[test]
    fn contrastive_hand_value() {
        // mu=1, l1, pos dist 1, neg dists {2, 3}
        let mut tape = Tape::new();
        let anchor = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let positive = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let negatives = tape.constant(Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap());
        let l =
            contrastive_loss_with_negatives(&mut tape, anchor, positive, negatives, &cfg_l1())
                .unwrap();
        let want = -((-1.0_f64).exp() / ((-1.0_f64).exp() + (-2.0_f64).exp() + (-3.0_f64).exp())).ln();
        assert_abs_diff_eq!(scalar_of(&tape, l), want, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_in_batch_matches_direct_evaluation() {
        let n = 5;
        let d = 3;
        let mut rng = stream_rng(3, 60);
        let mut mk = |rows: usize| {
            Tensor::matrix(
                rows,
                d,
                (0..rows * d).map(|_| sample_standard_normal(&mut rng)).collect(),
            )
            .unwrap()
        };
        let a = mk(n);
        let p = mk(n);
        let mut cfg = cfg_l1();
        cfg.temperature = 0.7;

        let mut tape = Tape::new();
        let aid = tape.constant(a.clone());
        let pid = tape.constant(p.clone());
        let l = contrastive_loss_in_batch(&mut tape, aid, pid, &cfg).unwrap();

        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum()
        };
        let mut acc = 0.0;
        for i in 0..n {
            let dp = dist(a.row(i), p.row(i)) / cfg.temperature;
            let mut denom = (-dp).exp();
            for j in 0..n {
                if j != i {
                    denom += (-dist(a.row(i), a.row(j)) / cfg.temperature).exp();
                }
            }
            acc += -((-dp).exp() / denom).ln();
        }
        assert_abs_diff_eq!(scalar_of(&tape, l), acc / n as f64, epsilon = 1e-10);
    }

    #[test]
    fn contrastive_rejects_degenerate_batches() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let p = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(contrastive_loss_in_batch(&mut tape, a, p, &cfg_l1()).is_err());
    }

    #[test]
    fn residual_loss_examples() {
        let model = TransitionModel::from_mats(vec![Tensor::eye(2)]);
        let h = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let hid = tape.constant(h.clone());
        let zid = tape.constant(h.clone());
        let l = residual_loss(&mut tape, &bound, zid, &[hid], Metric::L1).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);

        let zero = TransitionModel::from_mats(vec![Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()]);
        let mut tape = Tape::new();
        let bound = zero.bind(&mut tape, false);
        let hid = tape.constant(h.clone());
        let z = Tensor::matrix(2, 2, vec![3.0, -1.0, 0.0, 4.0]).unwrap();
        let zid = tape.constant(z);
        let l = residual_loss(&mut tape, &bound, zid, &[hid], Metric::L1).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), (4.0 + 4.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_loss_random_matches_oracle() {
        let mut rng = stream_rng(9, 61);
        let model = TransitionModel::new_random(3, 2, &mut rng);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize| {
            Tensor::matrix(
                rows,
                3,
                (0..rows * 3).map(|_| sample_standard_normal(rng)).collect(),
            )
            .unwrap()
        };
        let z = mk(&mut rng, 4);
        let l1 = mk(&mut rng, 4);
        let l2 = mk(&mut rng, 4);
        let pred = model.transit_value(&[l1.clone(), l2.clone()]).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let sq: f64 = z
                .row(i)
                .iter()
                .zip(pred.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            want += sq.sqrt();
        }
        want /= 4.0;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let zid = tape.constant(z);
        let i1 = tape.constant(l1);
        let i2 = tape.constant(l2);
        let l = residual_loss(&mut tape, &bound, zid, &[i1, i2], Metric::L2).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), want, epsilon = 1e-10);
    }

    #[test]
    fn discriminator_model_loss_values() {
        let mut tape = Tape::new();
        let zero_logits = tape.constant(Tensor::matrix(3, 1, vec![0.0; 3]).unwrap());
        let l = discriminator_loss_model(&mut tape, zero_logits);
        assert_abs_diff_eq!(scalar_of(&tape, l), 0.0, epsilon = 1e-12);

        // sigmoid(ln 9) = 0.9
        let logit = (9.0_f64).ln();
        let nine = tape.constant(Tensor::matrix(2, 1, vec![logit, logit]).unwrap());
        let l = discriminator_loss_model(&mut tape, nine);
        assert_abs_diff_eq!(
            scalar_of(&tape, l),
            (0.9_f64 / 0.1).ln(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn discriminator_adversary_values_and_clamp() {
        let mut tape = Tape::new();
        let zeros = tape.constant(Tensor::matrix(4, 1, vec![0.0; 4]).unwrap());
        let l = discriminator_loss_adversary(&mut tape, zeros, zeros);
        assert_abs_diff_eq!(scalar_of(&tape, l), 2.0 * 0.5_f64.ln(), epsilon = 1e-12);

        // saturated logits hit the probability clamp, stay finite
        let hi = tape.constant(Tensor::matrix(2, 1, vec![1e4, 1e4]).unwrap());
        let l = discriminator_loss_adversary(&mut tape, hi, hi);
        let v = scalar_of(&tape, l);
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, (1.0 - PROB_CLAMP).ln() + PROB_CLAMP.ln(), epsilon = 1e-9);
    }

    #[test]
    fn discriminator_paired_uses_both_batches() {
        let mut tape = Tape::new();
        let real = tape.constant(Tensor::matrix(2, 1, vec![(9.0_f64).ln(); 2]).unwrap());
        let perm = tape.constant(Tensor::matrix(2, 1, vec![0.0; 2]).unwrap());
        let l = discriminator_loss_model_paired(&mut tape, real, perm);
        assert_abs_diff_eq!(
            scalar_of(&tape, l),
            0.9_f64.ln() - 0.5_f64.ln(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut cfg = cfg_l1();
        cfg.beta_merge = 0.1;
        cfg.beta_residual = 0.2;
        cfg.beta_disc = 0.3;
        let mut tape = Tape::new();
        let parts: Vec<NodeId> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| tape.constant(Tensor::scalar(v)))
            .collect();
        let l = total_loss(&mut tape, parts[0], parts[1], parts[2], parts[3], &cfg).unwrap();
        assert_abs_diff_eq!(
            scalar_of(&tape, l),
            1.0 + 0.1 * 2.0 + 0.2 * 3.0 + 0.3 * 4.0,
            epsilon = 1e-12
        );

        cfg.beta_merge = 0.0;
        cfg.beta_residual = 0.0;
        cfg.beta_disc = 0.0;
        let l = total_loss(&mut tape, parts[0], parts[1], parts[2], parts[3], &cfg).unwrap();
        assert_abs_diff_eq!(scalar_of(&tape, l), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = cfg_l1();
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = cfg_l1();
        cfg.beta_disc = -1.0;
        assert!(cfg.validate().is_err());
    }
}
