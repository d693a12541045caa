//! Experiment configuration files.
//!
//! Configs are strict JSON: unknown keys are rejected, and every path in a
//! config is resolved against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use lider_core::analysis::ProbeConfig;
use lider_core::benchmark::{load_csv_stream, make_synthetic_stream, SyntheticSpec, TaskStream};
use lider_core::lider::LiderConfig;
use lider_core::rehearsal::methods::{BufferSettings, DerppSettings, GdumbSettings};
use lider_core::rehearsal::{MethodConfig, MethodKind, TrainConfig};
use lider_core::seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LIDER_OUT";
pub const DEFAULT_OUT: &str = "lider-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvStreamConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvStreamConfig {
    pub path: PathBuf,
    pub n_tasks: usize,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    /// Rescale features to zero mean and unit variance on the train union.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_split() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

/// One method to run, optionally with the regularizer attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: MethodKind,
    #[serde(default)]
    pub lider: bool,
    /// Replaces the top-level `lider` section for this entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lider_config: Option<LiderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodEntry {
    pub fn label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None if self.lider => format!("{}_lider", self.method.name()),
            None => self.method.name().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Task and test-set row of the point the surface is drawn around.
    pub point_task: usize,
    pub point_index: usize,
    pub surface_radius: f64,
    pub grid_size: usize,
    /// Restrict the margin to the classes of `point_task`.
    pub restrict_to_task: bool,
    pub probe: ProbeConfig,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            point_task: 0,
            point_index: 0,
            surface_radius: 1.0,
            grid_size: 21,
            restrict_to_task: false,
            probe: ProbeConfig::default(),
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            trials: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub buffer: BufferSettings,
    #[serde(default)]
    pub derpp: DerppSettings,
    #[serde(default)]
    pub gdumb: GdumbSettings,
    #[serde(default)]
    pub lider: LiderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.methods.is_empty() {
            return Err(CliError::config("methods: at least one entry is required"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds: at least one seed is required"));
        }
        let mut labels = HashSet::new();
        for entry in &self.methods {
            let label = entry.label();
            if !labels.insert(label.clone()) {
                return Err(CliError::Config(format!("methods: duplicate label `{}`", label)));
            }
            if entry.lider_config.is_some() && !entry.lider {
                return Err(CliError::Config(format!(
                    "methods: `{}` sets lider_config without lider = true",
                    label
                )));
            }
            self.method_config(entry).validate().map_err(CliError::config)?;
            if let Some(l) = self.lider_for(entry) {
                l.validate().map_err(CliError::config)?;
            }
        }
        self.train.validate().map_err(CliError::config)?;
        let a = &self.analysis;
        if a.grid_size % 2 == 0 {
            return Err(CliError::Config(format!("analysis.grid_size must be odd, got {}", a.grid_size)));
        }
        if a.trials == 0 || a.probe.n_perturb == 0 {
            return Err(CliError::config("analysis.trials and analysis.probe.n_perturb must be >= 1"));
        }
        if a.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(CliError::config("analysis.sigmas must be >= 0"));
        }
        match &self.stream {
            StreamConfig::Synthetic(spec) => spec.validate().map_err(CliError::config)?,
            StreamConfig::Csv(c) => {
                let path = self.resolve(&c.path);
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "stream.path: file {} does not exist",
                        path.display()
                    )));
                }
                // Parse once so malformed rows are reported before any run starts.
                self.build_stream(0)?;
            }
        }
        Ok(())
    }

    pub fn method_config(&self, entry: &MethodEntry) -> MethodConfig {
        MethodConfig {
            kind: entry.method,
            buffer: self.buffer.clone(),
            derpp: self.derpp.clone(),
            gdumb: self.gdumb.clone(),
        }
    }

    pub fn lider_for(&self, entry: &MethodEntry) -> Option<LiderConfig> {
        entry
            .lider
            .then(|| entry.lider_config.clone().unwrap_or_else(|| self.lider.clone()))
    }

    /// The task stream seen by runs with `run_seed`.
    pub fn build_stream(&self, run_seed: u64) -> CliResult<TaskStream> {
        let stream_seed = seed::derive(run_seed, seed::STREAM);
        match &self.stream {
            StreamConfig::Synthetic(spec) => make_synthetic_stream(spec, stream_seed).map_err(CliError::config),
            StreamConfig::Csv(c) => {
                let s = load_csv_stream(&self.resolve(&c.path), c.n_tasks, c.split_fraction, stream_seed)
                    .map_err(|e| CliError::Config(format!("stream.path {}: {}", c.path.display(), e)))?;
                if c.standardize {
                    s.standardized().map_err(CliError::config)
                } else {
                    Ok(s)
                }
            }
        }
    }

    /// Output root: the flag, then `out_dir`, then the environment, then a
    /// fixed default.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out_dir {
            return self.resolve(p);
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUT),
        }
    }
}
