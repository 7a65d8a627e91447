//! Checkpoint container: everything needed to resume a run bit-for-bit.
//! Same layout convention as the dataset container: magic, version,
//! JSON header, then little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::dataset::{read_f64s, truncation, write_f64s, ViewDataset};
use crate::error::{CoreError, Result};
use crate::synthgen::stream_rng;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainerState, STREAM_TRAIN};

const MAGIC: &[u8; 4] = b"MVCK";
const VERSION: u16 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct GroupHeader {
    name: String,
    shapes: Vec<Vec<usize>>,
    adam_step: u64,
    adam_lr: f64,
    adam_betas: (f64, f64),
    adam_eps: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    config: TrainConfig,
    obs_dims: Vec<usize>,
    latent_dims: Vec<usize>,
    d_c: usize,
    lags: usize,
    epoch: usize,
    cycle_pos: usize,
    /// None while no evaluation has happened yet.
    best_mcc: Option<f64>,
    rng_word_pos: [u64; 2],
    groups: Vec<GroupHeader>,
}

/// Parameter groups in a fixed order matching the optimizer groups; the
/// encoder group carries the projection head when one exists.
fn group_params(state: &TrainerState) -> Vec<(&'static str, Vec<&Tensor>, &AdamState)> {
    let b = &state.bundle;
    let mut enc = b.encoders.params();
    if let Some(p) = &b.projection {
        enc.extend(p.params());
    }
    vec![
        ("encoders", enc, &state.adam_encoders),
        ("transition", b.transition.params(), &state.adam_transition),
        ("alignment", b.alignment.params(), &state.adam_alignment),
        (
            "discriminator",
            b.discriminator.params(),
            &state.adam_discriminator,
        ),
    ]
}

pub fn write_checkpoint(state: &TrainerState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let groups = group_params(state);
    let header = CkptHeader {
        config: cfg.clone(),
        obs_dims: state
            .bundle
            .encoders
            .mlps
            .iter()
            .map(|m| m.input_dim())
            .collect(),
        latent_dims: state.bundle.layout.view_dims.clone(),
        d_c: state.bundle.layout.d_c,
        lags: state.bundle.transition.lags(),
        epoch: state.epoch,
        cycle_pos: state.cycle_pos,
        best_mcc: state.best_mcc.is_finite().then_some(state.best_mcc),
        rng_word_pos: {
            let wp = state.rng.get_word_pos();
            [(wp >> 64) as u64, wp as u64]
        },
        groups: groups
            .iter()
            .map(|(name, params, adam)| GroupHeader {
                name: name.to_string(),
                shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
                adam_step: adam.step_count,
                adam_lr: adam.learning_rate,
                adam_betas: adam.beta_moments,
                adam_eps: adam.epsilon,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, params, adam) in &groups {
        for p in params {
            write_f64s(&mut w, p.data())?;
        }
        let (m, v) = adam.moments();
        for (i, p) in params.iter().enumerate() {
            match m.get(i) {
                Some(mi) => write_f64s(&mut w, mi)?,
                None => write_f64s(&mut w, &vec![0.0; p.data().len()])?,
            }
        }
        for (i, p) in params.iter().enumerate() {
            match v.get(i) {
                Some(vi) => write_f64s(&mut w, vi)?,
                None => write_f64s(&mut w, &vec![0.0; p.data().len()])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a trainer state against the dataset it was trained on. The
/// dataset fixes all shapes; the file must agree with it exactly.
pub fn read_checkpoint(path: &Path, ds: &ViewDataset) -> Result<(TrainerState, TrainConfig)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncation)?;
    if &magic != MAGIC {
        return Err(CoreError::format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut vbytes = [0u8; 2];
    r.read_exact(&mut vbytes).map_err(truncation)?;
    let version = u16::from_le_bytes(vbytes);
    if version != VERSION {
        return Err(CoreError::format(format!(
            "checkpoint version {} unsupported (expected {})",
            version, VERSION
        )));
    }
    let mut lbytes = [0u8; 4];
    r.read_exact(&mut lbytes).map_err(truncation)?;
    let hlen = u32::from_le_bytes(lbytes) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(truncation)?;
    let header: CkptHeader = serde_json::from_slice(&hbytes)
        .map_err(|e| CoreError::format(format!("checkpoint header: {}", e)))?;

    let cfg = header.config.clone();
    let mut state = TrainerState::init(ds, &cfg)?;

    let obs_dims: Vec<usize> = state
        .bundle
        .encoders
        .mlps
        .iter()
        .map(|m| m.input_dim())
        .collect();
    if header.obs_dims != obs_dims
        || header.latent_dims != state.bundle.layout.view_dims
        || header.d_c != state.bundle.layout.d_c
        || header.lags != state.bundle.transition.lags()
    {
        return Err(CoreError::format(
            "checkpoint does not match the dataset's dimensions".to_string(),
        ));
    }
    if header.groups.len() != 4 {
        return Err(CoreError::format(format!(
            "expected 4 parameter groups, found {}",
            header.groups.len()
        )));
    }

    {
        let b = &mut state.bundle;
        let mut groups: Vec<(&'static str, Vec<&mut Tensor>)> = Vec::new();
        let mut enc = b.encoders.params_mut();
        if let Some(p) = &mut b.projection {
            enc.extend(p.params_mut());
        }
        groups.push(("encoders", enc));
        groups.push(("transition", b.transition.params_mut()));
        groups.push(("alignment", b.alignment.params_mut()));
        groups.push(("discriminator", b.discriminator.params_mut()));

        let mut adams: Vec<AdamState> = Vec::with_capacity(4);
        for (gh, (name, params)) in header.groups.iter().zip(groups.iter_mut()) {
            if gh.name != *name {
                return Err(CoreError::format(format!(
                    "parameter group '{}' where '{}' was expected",
                    gh.name, name
                )));
            }
            let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
            if gh.shapes != shapes {
                return Err(CoreError::format(format!(
                    "parameter shapes for group '{}' do not match the dataset",
                    name
                )));
            }
            for p in params.iter_mut() {
                let vals = read_f64s(&mut r, p.data().len())?;
                p.data_mut().copy_from_slice(&vals);
            }
            let mut first = Vec::with_capacity(params.len());
            for p in params.iter() {
                first.push(read_f64s(&mut r, p.data().len())?);
            }
            let mut second = Vec::with_capacity(params.len());
            for p in params.iter() {
                second.push(read_f64s(&mut r, p.data().len())?);
            }
            adams.push(AdamState::restore(
                gh.adam_lr,
                gh.adam_betas,
                gh.adam_eps,
                gh.adam_step,
                first,
                second,
            ));
        }
        state.adam_discriminator = adams.pop().unwrap();
        state.adam_alignment = adams.pop().unwrap();
        state.adam_transition = adams.pop().unwrap();
        state.adam_encoders = adams.pop().unwrap();
    }

    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CoreError::format(
            "checkpoint file has trailing bytes".to_string(),
        ));
    }

    state.rng = stream_rng(cfg.seed, STREAM_TRAIN);
    state
        .rng
        .set_word_pos(((header.rng_word_pos[0] as u128) << 64) | header.rng_word_pos[1] as u128);
    state.epoch = header.epoch;
    state.cycle_pos = header.cycle_pos;
    state.best_mcc = header.best_mcc.unwrap_or(f64::NEG_INFINITY);
    Ok((state, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::MergeLayout;
    use crate::synthgen::{NoiseKind, NoiseSpec, VarProcessSpec};
    use crate::trainer;

    fn tiny_dataset(seed: u64) -> ViewDataset {
        let spec = VarProcessSpec {
            d: 4,
            lags: 2,
            seq_len: 30,
            n_seq: 4,
            noise: NoiseSpec {
                kind: NoiseKind::Laplace,
                scale: 0.05,
            },
            seed,
            stability_radius: 0.97,
        };
        let layout = MergeLayout::new(2, vec![3, 3]).unwrap();
        crate::dataset::generate_dataset(&spec, &layout).unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = epochs;
        cfg.batch_size = 8;
        cfg.eval_every = 1;
        cfg.seed = 3;
        cfg
    }

    fn assert_states_identical(a: &TrainerState, b: &TrainerState) {
        let pa = {
            let mut v = a.bundle.encoders.params();
            v.extend(a.bundle.transition.params());
            v.extend(a.bundle.alignment.params());
            v.extend(a.bundle.discriminator.params());
            v
        };
        let pb = {
            let mut v = b.bundle.encoders.params();
            v.extend(b.bundle.transition.params());
            v.extend(b.bundle.alignment.params());
            v.extend(b.bundle.discriminator.params());
            v
        };
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.shape(), y.shape());
            for (u, w) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), w.to_bits(), "parameter mismatch");
            }
        }
        assert_eq!(a.rng, b.rng);
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.cycle_pos, b.cycle_pos);
        assert_eq!(a.best_mcc.to_bits(), b.best_mcc.to_bits());
        for (x, y) in [
            (&a.adam_encoders, &b.adam_encoders),
            (&a.adam_transition, &b.adam_transition),
            (&a.adam_alignment, &b.adam_alignment),
            (&a.adam_discriminator, &b.adam_discriminator),
        ] {
            assert_eq!(x.step_count, y.step_count);
            let (m1, v1) = x.moments();
            let (m2, v2) = y.moments();
            let flat = |m: &[Vec<f64>]| -> Vec<u64> {
                m.iter().flatten().map(|f| f.to_bits()).collect()
            };
            assert_eq!(flat(m1), flat(m2), "first moments differ");
            assert_eq!(flat(v1), flat(v2), "second moments differ");
        }
    }

    #[test]
    fn round_trip_preserves_state_exactly() {
        let ds = tiny_dataset(11);
        let cfg = tiny_config(2);
        let out = trainer::run_training(&ds, &cfg, None).unwrap();
        let dir = std::env::temp_dir().join("mvck_round_trip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.mvck");
        write_checkpoint(&out.state, &cfg, &path).unwrap();
        let (restored, cfg2) = read_checkpoint(&path, &ds).unwrap();
        assert_eq!(cfg2.epochs, cfg.epochs);
        assert_states_identical(&out.state, &restored);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(12);
        let full = trainer::run_training(&ds, &tiny_config(4), None).unwrap();

        let cfg_half = tiny_config(2);
        let half = trainer::run_training(&ds, &cfg_half, None).unwrap();
        let dir = std::env::temp_dir().join("mvck_resume");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("half.mvck");
        write_checkpoint(&half.state, &cfg_half, &path).unwrap();

        let (restored, mut cfg_resume) = read_checkpoint(&path, &ds).unwrap();
        cfg_resume.epochs = 4;
        let resumed =
            trainer::continue_training(restored, &ds, &cfg_resume, None, half.trace.clone())
                .unwrap();

        assert_states_identical(&full.state, &resumed.state);
        assert_eq!(full.trace.records.len(), resumed.trace.records.len());
        for (a, b) in full.trace.records.iter().zip(&resumed.trace.records) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.mcc.to_bits(), b.mcc.to_bits());
            assert_eq!(a.r2.to_bits(), b.r2.to_bits());
            assert_eq!(a.shd, b.shd);
            assert_eq!(a.l_contr.to_bits(), b.l_contr.to_bits());
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_magic_rejected() {
        let ds = tiny_dataset(13);
        let cfg = tiny_config(0);
        let state = TrainerState::init(&ds, &cfg).unwrap();
        let dir = std::env::temp_dir().join("mvck_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mvck");
        write_checkpoint(&state, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path, &ds).is_err());

        // truncation must surface as a format error, not a panic
        let good = {
            bytes[0] = b'M';
            bytes
        };
        std::fs::write(&path, &good[..good.len() - 9]).unwrap();
        let err = read_checkpoint(&path, &ds).unwrap_err();
        assert!(matches!(err, CoreError::Format(_)), "got {:?}", err);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let ds = tiny_dataset(14);
        let cfg = tiny_config(0);
        let state = TrainerState::init(&ds, &cfg).unwrap();
        let dir = std::env::temp_dir().join("mvck_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.mvck");
        write_checkpoint(&state, &cfg, &path).unwrap();

        let spec = VarProcessSpec {
            d: 5,
            lags: 2,
            seq_len: 30,
            n_seq: 4,
            noise: NoiseSpec {
                kind: NoiseKind::Laplace,
                scale: 0.05,
            },
            seed: 15,
            stability_radius: 0.97,
        };
        let layout = MergeLayout::new(2, vec![4, 3]).unwrap();
        let other = crate::dataset::generate_dataset(&spec, &layout).unwrap();
        assert!(read_checkpoint(&path, &other).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
