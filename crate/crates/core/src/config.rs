//! Run configuration files and the per-run output tree.
//!
//! A run is described by one TOML document. Every field has a default, so a
//! file only lists what it changes. The resolved configuration, with every
//! default written out, is hashed with SHA-256 and that digest is stored in
//! each checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_many, prepare, PreparedData, SplitSpec, WindowSpec, BATTERY_COLUMNS};
use crate::error::{GaetsError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable naming the output root when a config has no `out`.
pub const OUT_ENV: &str = "GAETS_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Logs windowed and split into train, validation and test.
    pub paths: Vec<PathBuf>,
    /// Optional logs appended to the test split only.
    pub test_paths: Vec<PathBuf>,
    /// Columns read from every log, in node order.
    pub columns: Vec<String>,
    /// Width of the optional trailing moving-average pre-filter.
    pub smooth: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            paths: Vec::new(),
            test_paths: Vec::new(),
            columns: BATTERY_COLUMNS.iter().map(|s| s.to_string()).collect(),
            smooth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            input_len: 80,
            horizon: 40,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn spec(&self) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            horizon: self.horizon,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub window: WindowConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// One training run per seed; empty means `train.seed` alone.
    pub seeds: Vec<u64>,
    /// Output root; falls back to `$GAETS_OUT`, then `runs`.
    pub out: Option<PathBuf>,
    /// Run directory name; derived from mode, horizon and hash when absent.
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            window: WindowConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: Vec::new(),
            out: None,
            run_id: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GaetsError::Config(e.to_string()))
    }

    /// Reads a config file; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GaetsError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            GaetsError::Config(m) => GaetsError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            cfg.data.paths.iter_mut().for_each(fix);
            cfg.data.test_paths.iter_mut().for_each(fix);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        let w = &self.window;
        if w.input_len == 0 || w.horizon == 0 || w.stride == 0 {
            return Err(GaetsError::Config(format!(
                "window lengths and stride must be at least 1, got T={} τ={} stride={}",
                w.input_len, w.horizon, w.stride
            )));
        }
        if self.data.columns.is_empty() {
            return Err(GaetsError::Config("no data columns configured".into()));
        }
        if self.data.smooth == Some(0) {
            return Err(GaetsError::Config("smooth width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Hex SHA-256 of the resolved TOML. Output locations do not enter the
    /// digest.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.run_id = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_name(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!(
                "{}-h{}-{}",
                self.train.mode.to_ascii_lowercase(),
                self.window.horizon,
                &self.hash()[..12]
            )
        })
    }

    /// Loads, smooths, windows, splits and normalises the configured logs.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        if self.data.paths.is_empty() {
            return Err(GaetsError::Config("no data paths configured".into()));
        }
        let smooth = |v: Vec<crate::data::RawSeries>| -> Result<Vec<_>> {
            match self.data.smooth {
                Some(k) => v.iter().map(|s| s.smoothed(k)).collect(),
                None => Ok(v),
            }
        };
        let segments = smooth(load_many(&self.data.paths, &self.data.columns)?)?;
        let test = smooth(load_many(&self.data.test_paths, &self.data.columns)?)?;
        prepare(&segments, &test, self.window.spec(), &self.split)
    }
}

/// `<root>/<run-id>/{config.toml, checkpoints/, logs/, reports/}`.
#[derive(Clone, Debug)]
pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        RunDirs {
            checkpoints: root.join("checkpoints"),
            logs: root.join("logs"),
            reports: root.join("reports"),
            root,
        }
    }

    pub fn create(&self) -> Result<()> {
        for d in [&self.root, &self.checkpoints, &self.logs, &self.reports] {
            std::fs::create_dir_all(d).map_err(|e| GaetsError::io(d, e))?;
        }
        Ok(())
    }

    /// Writes the resolved config beside the outputs.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<PathBuf> {
        let path = self.root.join("config.toml");
        let text = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml());
        std::fs::write(&path, text).map_err(|e| GaetsError::io(&path, e))?;
        Ok(path)
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.checkpoints.join(format!("seed{seed}.json"))
    }

    pub fn log(&self, seed: u64) -> PathBuf {
        self.logs.join(format!("seed{seed}.ndjson"))
    }
}
