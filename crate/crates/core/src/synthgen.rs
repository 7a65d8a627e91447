//! Ground-truth generation: VAR latent processes with a stability gate,
//! per-view channel subsets, and random injective mixing networks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// RNG stream ids; every role gets its own ChaCha stream off the one
/// dataset seed so parallel and serial generation agree bit for bit.
pub const STREAM_TRANSITION: u64 = 0;
pub const STREAM_VIEWS: u64 = 1;
pub const STREAM_MIXING: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_SEQUENCE_BASE: u64 = 1000;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw via Box-Muller (cosine branch).
pub fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Laplace,
    Gaussian,
}

/// Zero-mean exogenous noise law; `scale` is the Laplace diversity or the
/// Gaussian standard deviation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(CoreError::config(format!(
                "noise scale must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => self.scale * sample_standard_normal(rng),
            NoiseKind::Laplace => {
                // inverse CDF on u ~ U(-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                let arg = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                -self.scale * u.signum() * arg.ln()
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarProcessSpec {
    /// Latent dimension.
    pub d: usize,
    /// Maximum time lag L.
    pub lags: usize,
    /// Sequence length T.
    pub seq_len: usize,
    /// Number of sequences N.
    pub n_seq: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
    #[serde(default = "default_stability_radius")]
    pub stability_radius: f64,
}

fn default_stability_radius() -> f64 {
    0.97
}

impl VarProcessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(CoreError::config("d must be >= 1".to_string()));
        }
        if self.lags < 1 {
            return Err(CoreError::config("lags must be >= 1".to_string()));
        }
        if self.seq_len <= self.lags {
            return Err(CoreError::config(format!(
                "seq_len {} must exceed lags {}",
                self.seq_len, self.lags
            )));
        }
        if self.n_seq < 1 {
            return Err(CoreError::config("n_seq must be >= 1".to_string()));
        }
        if !(self.stability_radius > 0.0 && self.stability_radius <= 1.0) {
            return Err(CoreError::config(format!(
                "stability_radius must be in (0, 1], got {}",
                self.stability_radius
            )));
        }
        self.noise.validate()
    }
}

/// One simulated sequence. Rows 0..L of `eps` store the initial-state
/// draws; later rows store the exogenous noise of Eq-style recursion
/// z_t = sum_tau A_tau z_{t-tau} + eps_t.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub z: Tensor,
    pub eps: Tensor,
}

impl LatentTrajectory {
    /// Largest absolute deviation of z_t - sum_tau A_tau z_{t-tau} from the
    /// stored noise, over t > L.
    pub fn reconstruction_residual(&self, mats: &[Tensor]) -> f64 {
        let d = self.z.cols();
        let t_len = self.z.rows();
        let lags = mats.len();
        let mut worst = 0.0_f64;
        for t in lags..t_len {
            for i in 0..d {
                let mut pred = 0.0;
                for (tau, a) in mats.iter().enumerate() {
                    for j in 0..d {
                        pred += a.at(i, j) * self.z.at(t - tau - 1, j);
                    }
                }
                worst = worst.max((self.z.at(t, i) - pred - self.eps.at(t, i)).abs());
            }
        }
        worst
    }
}

/// Draw the lag matrices with i.i.d. U[-0.5, 0.5] entries, rejecting
/// rank-deficient draws. If the companion spectral radius lands above the
/// gate, rescale A_tau by s^tau, which scales every companion eigenvalue
/// by exactly s and pulls the radius onto the gate.
pub fn sample_transition_matrices(spec: &VarProcessSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_TRANSITION);
    let d = spec.d;
    for _attempt in 0..1000 {
        let mut mats = Vec::with_capacity(spec.lags);
        for _ in 0..spec.lags {
            let data: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
            mats.push(Tensor::matrix(d, d, data)?);
        }
        if mats.iter().any(|m| linalg::rank(m, 1e-9) < d) {
            continue;
        }
        let companion = linalg::companion_matrix(&mats)?;
        let rho = linalg::spectral_radius(&companion)?;
        if rho > spec.stability_radius {
            // small slack keeps the post-scaling radius strictly inside the
            // gate despite the radius estimate's own error
            let s = spec.stability_radius * (1.0 - 1e-6) / rho;
            for (tau, m) in mats.iter_mut().enumerate() {
                let f = s.powi(tau as i32 + 1);
                for v in m.data_mut() {
                    *v *= f;
                }
            }
        }
        return Ok(mats);
    }
    Err(CoreError::config(format!(
        "transition sampling failed 1000 rank rejections at d={} lags={}",
        d, spec.lags
    )))
}

/// Run the VAR recursion with the given noise matrix; rows 0..L of `eps`
/// are taken as the initial states.
pub fn var_recursion(mats: &[Tensor], eps: &Tensor) -> Result<Tensor> {
    let lags = mats.len();
    let (t_len, d) = (eps.rows(), eps.cols());
    if t_len <= lags {
        return Err(CoreError::shape(format!(
            "var_recursion: {} rows with {} lags",
            t_len, lags
        )));
    }
    let mut z = vec![0.0; t_len * d];
    z[..lags * d].copy_from_slice(&eps.data()[..lags * d]);
    for t in lags..t_len {
        for i in 0..d {
            let mut acc = eps.at(t, i);
            for (tau, a) in mats.iter().enumerate() {
                let zrow = &z[(t - tau - 1) * d..(t - tau) * d];
                let arow = a.row(i);
                for j in 0..d {
                    acc += arow[j] * zrow[j];
                }
            }
            z[t * d + i] = acc;
        }
    }
    Tensor::new(vec![t_len, d], z)
}

/// Simulate sequence `seq_index` of the dataset: standard-normal initial
/// states, then the noisy linear recursion.
pub fn simulate_var(mats: &[Tensor], spec: &VarProcessSpec, seq_index: usize) -> Result<LatentTrajectory> {
    spec.validate()?;
    if mats.len() != spec.lags {
        return Err(CoreError::shape(format!(
            "simulate_var: {} matrices for {} lags",
            mats.len(),
            spec.lags
        )));
    }
    let mut rng = stream_rng(spec.seed, STREAM_SEQUENCE_BASE + seq_index as u64);
    let (t_len, d) = (spec.seq_len, spec.d);
    let mut eps = vec![0.0; t_len * d];
    for v in eps.iter_mut().take(spec.lags * d) {
        *v = sample_standard_normal(&mut rng);
    }
    for v in eps.iter_mut().skip(spec.lags * d) {
        *v = spec.noise.sample(&mut rng);
    }
    let eps = Tensor::new(vec![t_len, d], eps)?;
    let z = var_recursion(mats, &eps)?;
    if !z.all_finite() {
        return Err(CoreError::numerical(format!(
            "simulate_var: non-finite state in sequence {}",
            seq_index
        )));
    }
    Ok(LatentTrajectory { z, eps })
}

/// Choose the per-view channel subsets S_v: a shared core of size d_c, a
/// partition of the remaining channels, then padding from other views'
/// channels (views >= 3 only) up to each view's size. Sets are returned
/// sorted.
pub fn select_view_indices(
    d: usize,
    view_dims: &[usize],
    d_c: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let v_count = view_dims.len();
    if v_count == 0 {
        return Err(CoreError::config("select_view_indices: no views".to_string()));
    }
    if let Some(&min) = view_dims.iter().min() {
        if d_c > min {
            return Err(CoreError::config(format!(
                "d_c {} exceeds smallest view size {}",
                d_c, min
            )));
        }
    }
    if view_dims.iter().any(|&dv| dv > d) {
        return Err(CoreError::config(format!(
            "a view size in {:?} exceeds d={}",
            view_dims, d
        )));
    }
    let m = d - d_c;
    let slots: usize = view_dims.iter().map(|&dv| dv - d_c).sum();
    if slots < m {
        return Err(CoreError::config(format!(
            "private slots {} cannot cover {} non-core channels",
            slots, m
        )));
    }
    if v_count == 1 {
        if view_dims[0] != d || d_c != d {
            return Err(CoreError::config(format!(
                "single view requires d_1 = d_c = d, got d_1={} d_c={} d={}",
                view_dims[0], d_c, d
            )));
        }
        return Ok(vec![(0..d).collect()]);
    }
    if v_count == 2 && slots != m {
        // any channel shared by both views would join the intersection
        return Err(CoreError::config(format!(
            "two views need (d_1 - d_c) + (d_2 - d_c) == d - d_c, got {} vs {}",
            slots, m
        )));
    }
    if slots > m * (v_count.max(2) - 1) {
        return Err(CoreError::config(format!(
            "private slots {} exceed {} channels times {} allowed repeats",
            slots,
            m,
            v_count - 1
        )));
    }

    let mut rng = stream_rng(seed, STREAM_VIEWS);
    let mut channels: Vec<usize> = (0..d).collect();
    shuffle(&mut channels, &mut rng);
    let core: Vec<usize> = channels[..d_c].to_vec();
    let rest: Vec<usize> = channels[d_c..].to_vec();

    // round-robin partition of the non-core channels, respecting quotas
    let mut members: Vec<Vec<usize>> = vec![core.clone(); v_count];
    let quotas: Vec<usize> = view_dims.iter().map(|&dv| dv - d_c).collect();
    let mut fill: Vec<usize> = vec![0; v_count];
    let mut vi = 0;
    for &c in &rest {
        while fill[vi] >= quotas[vi] {
            vi = (vi + 1) % v_count;
        }
        members[vi].push(c);
        fill[vi] += 1;
        vi = (vi + 1) % v_count;
    }
    // pad deficits with channels from other views, least-replicated first,
    // never letting a channel reach all views
    let mut replication: Vec<usize> = vec![0; d];
    for mem in &members {
        for &c in &mem[d_c..] {
            replication[c] += 1;
        }
    }
    for v in 0..v_count {
        while fill[v] < quotas[v] {
            let cand = rest
                .iter()
                .copied()
                .filter(|&c| !members[v].contains(&c) && replication[c] < v_count - 1)
                .min_by_key(|&c| (replication[c], c));
            match cand {
                Some(c) => {
                    members[v].push(c);
                    replication[c] += 1;
                    fill[v] += 1;
                }
                None => {
                    return Err(CoreError::config(format!(
                        "cannot pad view {} to size {} without collapsing the intersection",
                        v, view_dims[v]
                    )));
                }
            }
        }
    }
    for mem in &mut members {
        mem.sort_unstable();
    }
    verify_sets(d, view_dims, d_c, &members)?;
    Ok(members)
}

fn verify_sets(d: usize, view_dims: &[usize], d_c: usize, sets: &[Vec<usize>]) -> Result<()> {
    let mut union = vec![false; d];
    let mut count = vec![0usize; d];
    for (v, s) in sets.iter().enumerate() {
        if s.len() != view_dims[v] {
            return Err(CoreError::config(format!(
                "view {} has {} channels, expected {}",
                v,
                s.len(),
                view_dims[v]
            )));
        }
        for &c in s {
            union[c] = true;
            count[c] += 1;
        }
    }
    if union.iter().any(|&u| !u) {
        return Err(CoreError::config("view union misses a channel".to_string()));
    }
    let inter = count.iter().filter(|&&c| c == sets.len()).count();
    if inter != d_c {
        return Err(CoreError::config(format!(
            "intersection size {} != d_c {}",
            inter, d_c
        )));
    }
    Ok(())
}

fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Observation dimension of a view with `s| = subset_len` input channels.
pub fn view_obs_dim(subset_len: usize) -> usize {
    (2 * subset_len).max(16)
}

/// Random injective MLP from a view's latent subset to its observations.
/// Bias-free; three hidden leaky-ReLU layers of the output width, weights
/// orthogonal columns scaled by 1.2.
#[derive(Debug, Clone)]
pub struct MixingNetwork {
    pub weights: Vec<Tensor>,
}

pub const MIXING_SLOPE: f64 = 0.2;
const MIXING_GAIN: f64 = 1.2;

impl MixingNetwork {
    pub fn from_weights(weights: Vec<Tensor>) -> Self {
        MixingNetwork { weights }
    }

    pub fn generate(input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = view_obs_dim(input_dim);
        let dims = [(h, input_dim), (h, h), (h, h), (h, h)];
        let mut weights = Vec::with_capacity(dims.len());
        for &(rows, cols) in &dims {
            let mut w = loop {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| sample_standard_normal(rng))
                    .collect();
                let mut t = Tensor::matrix(rows, cols, data)?;
                if linalg::orthonormalize_columns(&mut t).is_ok() {
                    break t;
                }
            };
            for v in w.data_mut() {
                *v *= MIXING_GAIN;
            }
            if linalg::rank(&w, 1e-9) < cols {
                return Err(CoreError::numerical(
                    "mixing weight lost full column rank".to_string(),
                ));
            }
            weights.push(w);
        }
        Ok(MixingNetwork { weights })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.rows()).unwrap_or(0)
    }

    /// Forward pass on row-major batches: x W1^T, activation between
    /// consecutive layers, final layer linear.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            cur = cur.matmul(&w.transpose())?;
            if i < last {
                for v in cur.data_mut() {
                    if *v < 0.0 {
                        *v *= MIXING_SLOPE;
                    }
                }
            }
        }
        Ok(cur)
    }
}

/// Columns of `m` restricted to `cols`, in the given order.
pub fn restrict_columns(m: &Tensor, cols: &[usize]) -> Tensor {
    let (n, w) = (m.rows(), m.cols());
    let mut out = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        for &c in cols {
            debug_assert!(c < w);
            out.push(m.at(i, c));
        }
    }
    Tensor::new(vec![n, cols.len()], out).expect("restricted shape")
}

/// Observations for every view of one trajectory.
pub fn mix_views(
    traj: &LatentTrajectory,
    nets: &[MixingNetwork],
    sets: &[Vec<usize>],
) -> Result<Vec<Tensor>> {
    if nets.len() != sets.len() {
        return Err(CoreError::shape(format!(
            "mix_views: {} networks vs {} index sets",
            nets.len(),
            sets.len()
        )));
    }
    nets.iter()
        .zip(sets.iter())
        .map(|(net, s)| net.forward(&restrict_columns(&traj.z, s)))
        .collect()
}
