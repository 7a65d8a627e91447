//! Trainable components: per-view encoders, the linear causal transition,
//! the noise discriminator, and per-view alignment logits. Parameters live
//! here as plain tensors; each training step binds them onto a fresh tape.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::align::{self, SinkhornConfig};
use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Kaiming-uniform fan-in init matched to the leaky-ReLU slope.
    fn kaiming(out_dim: usize, in_dim: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let gain2 = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let bound = (gain2 * 3.0 / in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut weight = Tensor::matrix(out_dim, in_dim, data).expect("init shape");
        weight.requires_grad = true;
        let bias = with_bias.then(|| {
            let b = 1.0 / (in_dim as f64).sqrt();
            let mut t = Tensor::vector((0..out_dim).map(|_| rng.random_range(-b..b)).collect());
            t.requires_grad = true;
            t
        });
        Linear { weight, bias }
    }
}

/// A leaky-ReLU MLP; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`; `final_bias` controls the last
    /// layer only, hidden layers always carry biases.
    pub fn new(dims: &[usize], final_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(Linear::kaiming(
                dims[i + 1],
                dims[i],
                !last || final_bias,
                rng,
            ));
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layer_ids = self
            .layers
            .iter()
            .map(|l| {
                let w = bind_param(tape, &l.weight, trainable);
                let b = l.bias.as_ref().map(|b| bind_param(tape, b, trainable));
                (w, b)
            })
            .collect();
        BoundMlp { layer_ids }
    }
}

fn bind_param(tape: &mut Tape, t: &Tensor, trainable: bool) -> NodeId {
    if trainable {
        tape.leaf(t)
    } else {
        tape.constant(t.clone())
    }
}

pub struct BoundMlp {
    layer_ids: Vec<(NodeId, Option<NodeId>)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.layer_ids.len() - 1;
        for (i, (w, b)) in self.layer_ids.iter().enumerate() {
            let wt = tape.transpose(*w);
            cur = tape.matmul(cur, wt)?;
            if let Some(b) = b {
                cur = tape.add_row_broadcast(cur, *b)?;
            }
            if i < last {
                cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            }
        }
        Ok(cur)
    }

    /// Flat ids in the same order as `Mlp::params`.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (w, b) in &self.layer_ids {
            out.push(*w);
            if let Some(b) = b {
                out.push(*b);
            }
        }
        out
    }
}

pub fn encoder_hidden_width(out_dim: usize) -> usize {
    (4 * out_dim).max(64)
}

/// One inversion MLP per view, observation width in, latent subset width
/// out. Final layers are bias-free.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub mlps: Vec<Mlp>,
}

impl EncoderStack {
    pub fn new(obs_dims: &[usize], latent_dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if obs_dims.len() != latent_dims.len() || obs_dims.is_empty() {
            return Err(CoreError::config(format!(
                "encoder stack: {} observation dims vs {} latent dims",
                obs_dims.len(),
                latent_dims.len()
            )));
        }
        let mlps = obs_dims
            .iter()
            .zip(latent_dims)
            .map(|(&obs, &lat)| {
                let h = encoder_hidden_width(lat);
                Mlp::new(&[obs, h, h, h, lat], false, rng)
            })
            .collect();
        Ok(EncoderStack { mlps })
    }

    pub fn n_views(&self) -> usize {
        self.mlps.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlps.iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlps.iter_mut().flat_map(|m| m.params_mut()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundMlp> {
        self.mlps.iter().map(|m| m.bind(tape, trainable)).collect()
    }

    /// Value-level per-view encoding of full observation matrices.
    pub fn encode_all(&self, observations: &[Tensor]) -> Result<Vec<Tensor>> {
        if observations.len() != self.mlps.len() {
            return Err(CoreError::shape(format!(
                "encode_all: {} batches for {} views",
                observations.len(),
                self.mlps.len()
            )));
        }
        observations
            .iter()
            .zip(&self.mlps)
            .map(|(x, m)| {
                let mut tape = Tape::new();
                let xid = tape.constant(x.clone());
                let bound = m.bind(&mut tape, false);
                let out = bound.forward(&mut tape, xid)?;
                Ok(tape.value(out).clone())
            })
            .collect()
    }
}

/// Trainable lag matrices of the linear causal transition.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub mats: Vec<Tensor>,
}

impl TransitionModel {
    pub fn new_random(d: usize, lags: usize, rng: &mut ChaCha8Rng) -> Self {
        let mats = (0..lags)
            .map(|_| {
                let data: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.05..0.05)).collect();
                let mut t = Tensor::matrix(d, d, data).expect("init shape");
                t.requires_grad = true;
                t
            })
            .collect();
        TransitionModel { mats }
    }

    pub fn from_mats(mats: Vec<Tensor>) -> Self {
        let mats = mats
            .into_iter()
            .map(|mut m| {
                m.requires_grad = true;
                m
            })
            .collect();
        TransitionModel { mats }
    }

    pub fn d(&self) -> usize {
        self.mats[0].rows()
    }

    pub fn lags(&self) -> usize {
        self.mats.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mats.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mats.iter_mut().collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTransition {
        BoundTransition {
            mat_ids: self
                .mats
                .iter()
                .map(|m| bind_param(tape, m, trainable))
                .collect(),
        }
    }

    /// Value-level prediction; `lagged[tau-1]` holds the batch at lag tau.
    pub fn transit_value(&self, lagged: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let ids: Vec<NodeId> = lagged.iter().map(|l| tape.constant(l.clone())).collect();
        let out = bound.transit(&mut tape, &ids)?;
        Ok(tape.value(out).clone())
    }
}

pub struct BoundTransition {
    pub mat_ids: Vec<NodeId>,
}

impl BoundTransition {
    /// z~_t = sum_tau z_{t-tau} A_tau^T on row-major batches.
    pub fn transit(&self, tape: &mut Tape, lagged: &[NodeId]) -> Result<NodeId> {
        if lagged.len() != self.mat_ids.len() {
            return Err(CoreError::shape(format!(
                "transit: {} lagged batches for {} lag matrices",
                lagged.len(),
                self.mat_ids.len()
            )));
        }
        let mut acc: Option<NodeId> = None;
        for (l, m) in lagged.iter().zip(&self.mat_ids) {
            let mt = tape.transpose(*m);
            let term = tape.matmul(*l, mt)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.unwrap())
    }

    /// eps^_t = z_t - transit(history).
    pub fn residual_noise(&self, tape: &mut Tape, z_t: NodeId, lagged: &[NodeId]) -> Result<NodeId> {
        let pred = self.transit(tape, lagged)?;
        tape.sub(z_t, pred)
    }
}

/// MLP from noise vectors to a scalar logit per sample.
#[derive(Debug, Clone)]
pub struct NoiseDiscriminator {
    pub mlp: Mlp,
}

impl NoiseDiscriminator {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        NoiseDiscriminator {
            mlp: Mlp::new(&[d, 64, 64, 1], true, rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.mlp.bind(tape, trainable)
    }
}

/// Per-view unconstrained logits; Sinkhorn makes them doubly stochastic,
/// binarization turns them into hard permutations.
#[derive(Debug, Clone)]
pub struct AlignmentMatrices {
    pub logits: Vec<Tensor>,
}

impl AlignmentMatrices {
    pub fn new_random(view_dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let logits = view_dims
            .iter()
            .map(|&dv| {
                let data: Vec<f64> = (0..dv * dv).map(|_| rng.random_range(-0.05..0.05)).collect();
                let mut t = Tensor::matrix(dv, dv, data).expect("init shape");
                t.requires_grad = true;
                t
            })
            .collect();
        AlignmentMatrices { logits }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.logits.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.logits.iter_mut().collect()
    }

    /// Doubly stochastic B^v on the tape, differentiable through the
    /// Sinkhorn iterations when bound trainable.
    pub fn bind_doubly_stochastic(
        &self,
        tape: &mut Tape,
        cfg: &SinkhornConfig,
        trainable: bool,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut logit_ids = Vec::with_capacity(self.logits.len());
        let mut ds_ids = Vec::with_capacity(self.logits.len());
        for l in &self.logits {
            let id = bind_param(tape, l, trainable);
            logit_ids.push(id);
            ds_ids.push(align::sinkhorn_on_tape(tape, id, cfg)?);
        }
        Ok((logit_ids, ds_ids))
    }

    /// Current doubly stochastic values without a surrounding tape.
    pub fn doubly_stochastic(&self, cfg: &SinkhornConfig) -> Result<Vec<Tensor>> {
        self.logits.iter().map(|l| align::sinkhorn(l, cfg)).collect()
    }

    /// Hard permutation matrices.
    pub fn permutations(&self, cfg: &SinkhornConfig) -> Result<Vec<Tensor>> {
        self.doubly_stochastic(cfg)?
            .iter()
            .map(align::binarize)
            .collect()
    }
}

/// Trainable linear map from concatenated view encodings to the merged
/// latent width; replaces alignment and merge in the no-permutation
/// ablation.
#[derive(Debug, Clone)]
pub struct ConcatProjection {
    pub weight: Tensor,
}

impl ConcatProjection {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut weight = Tensor::matrix(out_dim, in_dim, data).expect("init shape");
        weight.requires_grad = true;
        ConcatProjection { weight }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NodeId {
        bind_param(tape, &self.weight, trainable)
    }

    pub fn forward(tape: &mut Tape, weight_id: NodeId, x: NodeId) -> Result<NodeId> {
        let wt = tape.transpose(weight_id);
        tape.matmul(x, wt)
    }
}

/// Independent per-column shuffles over the batch dimension, in the
/// column-major index layout the tape's shuffle op expects.
pub fn channel_permutation(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Arc<Vec<usize>> {
    let mut perms = Vec::with_capacity(n * m);
    for _ in 0..m {
        let base = perms.len();
        perms.extend(0..n);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perms.swap(base + i, base + j);
        }
    }
    Arc::new(perms)
}

/// Value-level per-channel batch shuffle of a noise matrix.
pub fn channel_permute_noise(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let perms = channel_permutation(n, m, rng);
    let mut out = vec![0.0; n * m];
    for j in 0..m {
        for i in 0..n {
            out[i * m + j] = x.at(perms[j * n + i], j);
        }
    }
    Tensor::new(vec![n, m], out).expect("shuffle shape")
}
