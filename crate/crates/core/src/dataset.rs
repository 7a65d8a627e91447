//! Dataset assembly and the on-disk container: magic `MVID`, version,
//! length-prefixed JSON header, then little-endian f64 payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::align::MergeLayout;
use crate::error::{CoreError, Result};
use crate::synthgen::{
    mix_views, sample_transition_matrices, select_view_indices, simulate_var, stream_rng,
    MixingNetwork, VarProcessSpec, STREAM_MIXING, STREAM_SPLIT,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MVID";
const VERSION: u16 = 1;

/// A generated multi-view dataset. Flat matrices index rows by
/// `seq * seq_len + t`.
#[derive(Debug, Clone)]
pub struct ViewDataset {
    pub spec: VarProcessSpec,
    pub d_c: usize,
    pub index_sets: Vec<Vec<usize>>,
    pub transition: Vec<Tensor>,
    pub z: Tensor,
    pub eps: Tensor,
    pub observations: Vec<Tensor>,
    pub mixing: Vec<MixingNetwork>,
}

impl ViewDataset {
    pub fn n_views(&self) -> usize {
        self.index_sets.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.index_sets.iter().map(|s| s.len()).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.z.rows()
    }

    /// Seed-deterministic 90/10 split over sequences; at least one
    /// sequence lands in each part when n_seq >= 2.
    pub fn split_sequences(&self) -> (Vec<usize>, Vec<usize>) {
        split_sequences(self.spec.n_seq, self.spec.seed)
    }
}

pub fn split_sequences(n_seq: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let mut order: Vec<usize> = (0..n_seq).collect();
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let mut n_val = ((n_seq as f64) * 0.1).round() as usize;
    if n_seq >= 2 {
        n_val = n_val.clamp(1, n_seq - 1);
    } else {
        n_val = 0;
    }
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Simulate the full dataset for a view layout. Per-sequence RNG streams
/// make the result independent of scheduling.
pub fn generate_dataset(spec: &VarProcessSpec, layout: &MergeLayout) -> Result<ViewDataset> {
    spec.validate()?;
    layout.validate()?;
    let transition = sample_transition_matrices(spec)?;
    let index_sets = select_view_indices(spec.d, &layout.view_dims, layout.d_c, spec.seed)?;
    let mut mix_rng = stream_rng(spec.seed, STREAM_MIXING);
    let mut mixing = Vec::with_capacity(index_sets.len());
    for s in &index_sets {
        mixing.push(MixingNetwork::generate(s.len(), &mut mix_rng)?);
    }

    let per_seq: Vec<(crate::synthgen::LatentTrajectory, Vec<Tensor>)> = (0..spec.n_seq)
        .into_par_iter()
        .map(|seq| {
            let traj = simulate_var(&transition, spec, seq)?;
            let obs = mix_views(&traj, &mixing, &index_sets)?;
            Ok((traj, obs))
        })
        .collect::<Result<_>>()?;

    let (t_len, d) = (spec.seq_len, spec.d);
    let n_rows = spec.n_seq * t_len;
    let mut z = Vec::with_capacity(n_rows * d);
    let mut eps = Vec::with_capacity(n_rows * d);
    let mut obs_data: Vec<Vec<f64>> = mixing
        .iter()
        .map(|m| Vec::with_capacity(n_rows * m.output_dim()))
        .collect();
    for (traj, obs) in &per_seq {
        z.extend_from_slice(traj.z.data());
        eps.extend_from_slice(traj.eps.data());
        for (v, x) in obs.iter().enumerate() {
            obs_data[v].extend_from_slice(x.data());
        }
    }
    let observations = obs_data
        .into_iter()
        .zip(mixing.iter())
        .map(|(data, m)| Tensor::new(vec![n_rows, m.output_dim()], data))
        .collect::<Result<Vec<_>>>()?;

    Ok(ViewDataset {
        spec: spec.clone(),
        d_c: layout.d_c,
        index_sets,
        transition,
        z: Tensor::new(vec![n_rows, d], z)?,
        eps: Tensor::new(vec![n_rows, d], eps)?,
        observations,
        mixing,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    spec: VarProcessSpec,
    d_c: usize,
    index_sets: Vec<Vec<usize>>,
    transition_shape: Vec<usize>,
    state_shape: Vec<usize>,
    obs_shapes: Vec<Vec<usize>>,
    mixing_shapes: Vec<Vec<Vec<usize>>>,
}

pub(crate) fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(truncation)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn truncation(e: std::io::Error) -> CoreError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CoreError::format("file truncated".to_string())
    } else {
        CoreError::Io(e)
    }
}

pub fn write_dataset(ds: &ViewDataset, path: &Path) -> Result<()> {
    let header = Header {
        spec: ds.spec.clone(),
        d_c: ds.d_c,
        index_sets: ds.index_sets.clone(),
        transition_shape: vec![ds.transition.len(), ds.spec.d, ds.spec.d],
        state_shape: ds.z.shape().to_vec(),
        obs_shapes: ds.observations.iter().map(|o| o.shape().to_vec()).collect(),
        mixing_shapes: ds
            .mixing
            .iter()
            .map(|m| m.weights.iter().map(|w| w.shape().to_vec()).collect())
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for a in &ds.transition {
        write_f64s(&mut w, a.data())?;
    }
    write_f64s(&mut w, ds.z.data())?;
    write_f64s(&mut w, ds.eps.data())?;
    for o in &ds.observations {
        write_f64s(&mut w, o.data())?;
    }
    for m in &ds.mixing {
        for wt in &m.weights {
            write_f64s(&mut w, wt.data())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ViewDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncation)?;
    if &magic != MAGIC {
        return Err(CoreError::format(format!(
            "bad dataset magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut vbytes = [0u8; 2];
    r.read_exact(&mut vbytes).map_err(truncation)?;
    let version = u16::from_le_bytes(vbytes);
    if version != VERSION {
        return Err(CoreError::format(format!(
            "dataset version {} unsupported (expected {})",
            version, VERSION
        )));
    }
    let mut lbytes = [0u8; 4];
    r.read_exact(&mut lbytes).map_err(truncation)?;
    let hlen = u32::from_le_bytes(lbytes) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(truncation)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| CoreError::format(format!("dataset header: {}", e)))?;

    let d = header.spec.d;
    if header.transition_shape != vec![header.transition_shape[0], d, d] {
        return Err(CoreError::format("transition shape mismatch".to_string()));
    }
    let n_rows = header.spec.n_seq * header.spec.seq_len;
    if header.state_shape != vec![n_rows, d] {
        return Err(CoreError::format("state shape mismatch".to_string()));
    }
    if header.obs_shapes.len() != header.index_sets.len()
        || header.mixing_shapes.len() != header.index_sets.len()
    {
        return Err(CoreError::format("per-view shape counts mismatch".to_string()));
    }

    let mut transition = Vec::with_capacity(header.transition_shape[0]);
    for _ in 0..header.transition_shape[0] {
        transition.push(Tensor::matrix(d, d, read_f64s(&mut r, d * d)?)?);
    }
    let z = Tensor::new(header.state_shape.clone(), read_f64s(&mut r, n_rows * d)?)?;
    let eps = Tensor::new(header.state_shape.clone(), read_f64s(&mut r, n_rows * d)?)?;
    let mut observations = Vec::with_capacity(header.obs_shapes.len());
    for shape in &header.obs_shapes {
        if shape.len() != 2 || shape[0] != n_rows {
            return Err(CoreError::format("observation shape mismatch".to_string()));
        }
        observations.push(Tensor::new(
            shape.clone(),
            read_f64s(&mut r, shape[0] * shape[1])?,
        )?);
    }
    let mut mixing = Vec::with_capacity(header.mixing_shapes.len());
    for shapes in &header.mixing_shapes {
        let mut weights = Vec::with_capacity(shapes.len());
        for shape in shapes {
            if shape.len() != 2 {
                return Err(CoreError::format("mixing weight shape mismatch".to_string()));
            }
            weights.push(Tensor::new(
                shape.clone(),
                read_f64s(&mut r, shape[0] * shape[1])?,
            )?);
        }
        mixing.push(MixingNetwork::from_weights(weights));
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => {}
        _ => {
            return Err(CoreError::format(
                "dataset file has trailing bytes".to_string(),
            ))
        }
    }
    Ok(ViewDataset {
        spec: header.spec,
        d_c: header.d_c,
        index_sets: header.index_sets,
        transition,
        z,
        eps,
        observations,
        mixing,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}
