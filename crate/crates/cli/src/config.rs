//! Declarative run configuration. One TOML document fully determines a
//! run: the latent process, the view layout, and the training setup.

use std::path::{Path, PathBuf};

use mvid_core::align::MergeLayout;
use mvid_core::error::{CoreError, Result};
use mvid_core::synthgen::{NoiseKind, VarProcessSpec};
use mvid_core::tape::Metric;
use mvid_core::trainer::{TrainConfig, TrainVariant};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub process: VarProcessSpec,
    pub views: MergeLayout,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CoreError::config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(CoreError::config("name must not be empty".to_string()));
        }
        self.process.validate()?;
        self.views.validate()?;
        self.train.validate()?;
        let d_total = self.views.total_dim();
        if d_total != self.process.d {
            return Err(CoreError::config(format!(
                "view layout spans {} latent channels but the process has {}",
                d_total, self.process.d
            )));
        }
        Ok(())
    }

    /// One seed drives the whole run: data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.process.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// A named cell of an ablation grid: the base config with a handful of
/// typed overrides applied.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellOverrides {
    pub variant: Option<TrainVariant>,
    pub noise_kind: Option<NoiseKind>,
    pub noise_scale: Option<f64>,
    pub metric: Option<Metric>,
    pub d: Option<usize>,
    pub lags: Option<usize>,
    pub d_c: Option<usize>,
    pub view_dims: Option<Vec<usize>>,
    pub beta_merge: Option<f64>,
    pub beta_residual: Option<f64>,
    pub beta_disc: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub label: String,
    #[serde(default)]
    pub overrides: CellOverrides,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub name: String,
    /// Each cell runs once per seed; metrics aggregate across them.
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
    pub cells: Vec<GridCell>,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let grid: GridConfig = toml::from_str(&text)
            .map_err(|e| CoreError::config(format!("{}: {}", path.display(), e)))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::config("grid needs at least one seed".to_string()));
        }
        if self.cells.is_empty() {
            return Err(CoreError::config("grid needs at least one cell".to_string()));
        }
        self.base.validate()
    }

    /// The base config with a cell's overrides applied; the result is
    /// validated so an infeasible cell fails before it runs.
    pub fn resolve_cell(&self, cell: &GridCell) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        cfg.name = format!("{}/{}", self.name, cell.label);
        let o = &cell.overrides;
        if let Some(v) = o.variant {
            cfg.train.variant = v;
        }
        if let Some(k) = o.noise_kind {
            cfg.process.noise.kind = k;
        }
        if let Some(s) = o.noise_scale {
            cfg.process.noise.scale = s;
        }
        if let Some(m) = o.metric {
            cfg.train.loss.metric = m;
        }
        if let Some(d) = o.d {
            cfg.process.d = d;
        }
        if let Some(l) = o.lags {
            cfg.process.lags = l;
        }
        if let Some(dc) = o.d_c {
            cfg.views.d_c = dc;
        }
        if let Some(dims) = &o.view_dims {
            cfg.views.view_dims = dims.clone();
        }
        if let Some(b) = o.beta_merge {
            cfg.train.loss.beta_merge = b;
        }
        if let Some(b) = o.beta_residual {
            cfg.train.loss.beta_residual = b;
        }
        if let Some(b) = o.beta_disc {
            cfg.train.loss.beta_disc = b;
        }
        if let Some(e) = o.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = o.learning_rate {
            cfg.train.learning_rate = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hex SHA-256 of a resolved config's canonical JSON form.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}

/// Default dataset file name for a config inside an output directory.
pub fn dataset_path(out_dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let safe: String = cfg
        .name
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    out_dir.join(format!("{}.mvid", safe))
}
