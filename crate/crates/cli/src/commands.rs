//! The four experiment verbs. Each returns a process exit code through
//! `CoreError` mapping in main.

use std::path::{Path, PathBuf};

use mvid_core::checkpoint;
use mvid_core::dataset::{self, ViewDataset};
use mvid_core::error::{CoreError, Result};
use mvid_core::metrics::{self, MetricsReport};
use mvid_core::trainer::{self, ModelBundle, TrainOutcome, TrainerState};

use crate::config::{config_digest, dataset_path, ExperimentConfig, GridConfig};

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Rows of the held-out validation sequences.
fn validation_rows(ds: &ViewDataset) -> Vec<usize> {
    let (_, val_seqs) = ds.split_sequences();
    val_seqs
        .iter()
        .flat_map(|&s| (0..ds.spec.seq_len).map(move |t| s * ds.spec.seq_len + t))
        .collect()
}

fn check_dataset_matches(cfg: &ExperimentConfig, ds: &ViewDataset) -> Result<()> {
    let spec_match = serde_json::to_value(&cfg.process)? == serde_json::to_value(&ds.spec)?;
    let layout_match =
        cfg.views.d_c == ds.d_c && cfg.views.view_dims == ds.view_dims();
    if !spec_match || !layout_match {
        return Err(CoreError::config(format!(
            "dataset does not match config: process {} (d={} vs {}), layout {} (d_c={} vs {})",
            if spec_match { "ok" } else { "differs" },
            ds.spec.d,
            cfg.process.d,
            if layout_match { "ok" } else { "differs" },
            ds.d_c,
            cfg.views.d_c,
        )));
    }
    Ok(())
}

pub fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    std::fs::create_dir_all(out)?;
    let ds = dataset::generate_dataset(&cfg.process, &cfg.views)?;
    let path = dataset_path(out, &cfg);
    dataset::write_dataset(&ds, &path)?;
    let checksum = dataset::file_checksum(&path)?;
    println!(
        "wrote {}\n  d={} d_c={} view_dims={:?} L={} T={} N={} noise={:?}({}) seed={}\n  sha256 {}",
        path.display(),
        ds.spec.d,
        ds.d_c,
        ds.view_dims(),
        ds.spec.lags,
        ds.spec.seq_len,
        ds.spec.n_seq,
        ds.spec.noise.kind,
        ds.spec.noise.scale,
        ds.spec.seed,
        checksum
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct MetricsSummary {
    mcc: f64,
    r2: f64,
    shd: usize,
}

impl From<&MetricsReport> for MetricsSummary {
    fn from(r: &MetricsReport) -> Self {
        MetricsSummary {
            mcc: r.mcc,
            r2: r.r2,
            shd: r.shd,
        }
    }
}

#[derive(serde::Serialize)]
struct TrainSummary {
    name: String,
    dataset: PathBuf,
    dataset_sha256: String,
    config_sha256: String,
    epochs_run: usize,
    seconds: f64,
    best_epoch: Option<usize>,
    best: Option<MetricsSummary>,
    r#final: MetricsSummary,
    config: ExperimentConfig,
}

pub fn cmd_train(
    config: &Path,
    dataset_file: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let ds = dataset::read_dataset(dataset_file)?;
    check_dataset_matches(&cfg, &ds)?;
    std::fs::create_dir_all(out)?;

    let started = std::time::Instant::now();
    let outcome = match resume {
        Some(ckpt_path) => {
            let (state, ckpt_cfg) = checkpoint::read_checkpoint(ckpt_path, &ds)?;
            let trace = trainer::TrainTrace::default();
            println!(
                "resuming from {} at epoch {}",
                ckpt_path.display(),
                state.epoch
            );
            let mut resumed_cfg = ckpt_cfg;
            resumed_cfg.epochs = cfg.train.epochs;
            trainer::continue_training(state, &ds, &resumed_cfg, Some(out), trace)?
        }
        None => trainer::run_training(&ds, &cfg.train, Some(out))?,
    };
    finish_train(&cfg, dataset_file, out, started.elapsed().as_secs_f64(), outcome, &ds)
}

fn finish_train(
    cfg: &ExperimentConfig,
    dataset_file: &Path,
    out: &Path,
    seconds: f64,
    outcome: TrainOutcome,
    ds: &ViewDataset,
) -> Result<()> {
    let val_rows = validation_rows(ds);
    let final_report = trainer::evaluate(
        &outcome.state.bundle,
        ds,
        &val_rows,
        &cfg.train.sinkhorn,
        cfg.train.shd_threshold,
    )?;
    let summary = TrainSummary {
        name: cfg.name.clone(),
        dataset: dataset_file.to_path_buf(),
        dataset_sha256: dataset::file_checksum(dataset_file)?,
        config_sha256: config_digest(cfg)?,
        epochs_run: outcome.state.epoch,
        seconds,
        best_epoch: outcome.best.as_ref().map(|b| b.epoch),
        best: outcome.best.as_ref().map(|b| MetricsSummary::from(&b.report)),
        r#final: MetricsSummary::from(&final_report),
        config: cfg.clone(),
    };
    write_json(&out.join("results.json"), &summary)?;
    match &outcome.best {
        Some(b) => println!(
            "done: best mcc {:.4} r2 {:.4} shd {} at epoch {} ({} epochs, {:.1}s)",
            b.report.mcc, b.report.r2, b.report.shd, b.epoch, outcome.state.epoch, seconds
        ),
        None => println!("done: no evaluation points ({:.1}s)", seconds),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    /// Evaluate a trained checkpoint.
    Checkpoint,
    /// Evaluate a freshly initialized model, no training.
    Identity,
    /// Fit encoders to the ground-truth latents first (debug upper bound).
    Supervised,
}

#[derive(serde::Serialize)]
struct EvalSummary {
    mode: String,
    dataset: PathBuf,
    dataset_sha256: String,
    metrics: MetricsSummary,
}

pub fn cmd_eval(
    checkpoint_path: Option<&Path>,
    config: Option<&Path>,
    dataset_file: &Path,
    out: &Path,
    mode: EvalMode,
    seed: Option<u64>,
) -> Result<()> {
    let ds = dataset::read_dataset(dataset_file)?;
    std::fs::create_dir_all(out)?;

    let load_cfg = || -> Result<ExperimentConfig> {
        let path = config.ok_or_else(|| {
            CoreError::config("this eval mode needs --config".to_string())
        })?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        check_dataset_matches(&cfg, &ds)?;
        Ok(cfg)
    };

    let (bundle, sinkhorn, shd_threshold, mode_name): (ModelBundle, _, _, &str) = match mode {
        EvalMode::Checkpoint => {
            let path = checkpoint_path.ok_or_else(|| {
                CoreError::config("checkpoint mode needs --checkpoint".to_string())
            })?;
            let (state, cfg) = checkpoint::read_checkpoint(path, &ds)?;
            (state.bundle, cfg.sinkhorn, cfg.shd_threshold, "checkpoint")
        }
        EvalMode::Identity => {
            let cfg = load_cfg()?;
            let state = TrainerState::init(&ds, &cfg.train)?;
            (state.bundle, cfg.train.sinkhorn, cfg.train.shd_threshold, "identity")
        }
        EvalMode::Supervised => {
            let cfg = load_cfg()?;
            let (bundle, _) = trainer::run_supervised(&ds, &cfg.train)?;
            (bundle, cfg.train.sinkhorn, cfg.train.shd_threshold, "supervised")
        }
    };

    let val_rows = validation_rows(&ds);
    let report = trainer::evaluate(&bundle, &ds, &val_rows, &sinkhorn, shd_threshold)?;
    metrics::export_correlation(&report, &out.join("correlation.csv"))?;
    let summary = EvalSummary {
        mode: mode_name.to_string(),
        dataset: dataset_file.to_path_buf(),
        dataset_sha256: dataset::file_checksum(dataset_file)?,
        metrics: MetricsSummary::from(&report),
    };
    write_json(&out.join("metrics.json"), &summary)?;
    println!(
        "{}: mcc {:.4} r2 {:.4} shd {}",
        mode_name, report.mcc, report.r2, report.shd
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct CellResult {
    label: String,
    status: String,
    seeds: usize,
    mcc_mean: f64,
    mcc_std: f64,
    r2_mean: f64,
    r2_std: f64,
    shd_mean: f64,
    shd_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_ablate(grid_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let grid = GridConfig::load(grid_path)?;
    std::fs::create_dir_all(out)?;
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => grid.seeds.clone(),
    };

    let mut rows: Vec<CellResult> = Vec::new();
    for cell in &grid.cells {
        let mut mccs = Vec::new();
        let mut r2s = Vec::new();
        let mut shds = Vec::new();
        let mut status = "ok".to_string();
        match grid.resolve_cell(cell) {
            Err(e) => status = format!("config error: {}", e),
            Ok(cfg) => {
                for &s in &seeds {
                    let run = || -> Result<MetricsReport> {
                        let cfg = cfg.clone().with_seed(s);
                        let ds = dataset::generate_dataset(&cfg.process, &cfg.views)?;
                        let outcome = trainer::run_training(&ds, &cfg.train, None)?;
                        let best = outcome
                            .best
                            .ok_or_else(|| CoreError::config("no eval points".to_string()))?;
                        Ok(best.report)
                    };
                    match run() {
                        Ok(report) => {
                            mccs.push(report.mcc);
                            r2s.push(report.r2);
                            shds.push(report.shd as f64);
                        }
                        Err(e) => {
                            status = format!("seed {} failed: {}", s, e);
                        }
                    }
                }
            }
        }
        let (mcc_mean, mcc_std) = mean_std(&mccs);
        let (r2_mean, r2_std) = mean_std(&r2s);
        let (shd_mean, shd_std) = mean_std(&shds);
        println!(
            "cell {:24} {}  mcc {:.4}±{:.4}  r2 {:.4}±{:.4}  shd {:.1}±{:.1}",
            cell.label, status, mcc_mean, mcc_std, r2_mean, r2_std, shd_mean, shd_std
        );
        rows.push(CellResult {
            label: cell.label.clone(),
            status,
            seeds: mccs.len(),
            mcc_mean,
            mcc_std,
            r2_mean,
            r2_std,
            shd_mean,
            shd_std,
        });
    }

    use std::io::Write;
    let csv_path = out.join(format!("{}.csv", grid.name));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(
        f,
        "label,status,seeds,mcc_mean,mcc_std,r2_mean,r2_std,shd_mean,shd_std"
    )?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.status.replace(',', ";"),
            r.seeds,
            r.mcc_mean,
            r.mcc_std,
            r.r2_mean,
            r.r2_std,
            r.shd_mean,
            r.shd_std
        )?;
    }
    f.flush()?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
