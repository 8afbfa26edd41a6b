use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hssfl::datahub::{load_csv, stratified_split, synth_mixture, Dataset};
use hssfl::federation::FedConfig;
use hssfl::numkit::{Purpose, RngStream, StreamId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const COMPLETION: &str = "completion.json";

pub fn version_tag() -> String {
    format!("hssfl {}", env!("CARGO_PKG_VERSION"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File { path: PathBuf, label_column: usize },
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    /// The desk-scale mixture drawn from `seed`.
    pub fn desk(seed: u64) -> DataSource {
        DataSource::Synthetic {
            classes: 10,
            dim: 32,
            per_class: 200,
            separation: 0.8,
            noise: 0.1,
            seed,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path, label_column } => Ok(load_csv(path, *label_column)
                .map_err(|e| e.context(format!("reading {}", path.display())))?),
            DataSource::Synthetic {
                classes,
                dim,
                per_class,
                separation,
                noise,
                seed,
            } => {
                let mut rng = RngStream::new(*seed, StreamId::new(Purpose::Data));
                Ok(synth_mixture(*classes, *dim, *per_class, *separation, *noise, &mut rng)?)
            }
        }
    }
}

/// Stratified train/test split drawn from the run seed.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = RngStream::new(seed, StreamId::new(Purpose::Split));
    Ok(stratified_split(data, train_fraction, &mut rng)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub config: PathBuf,
    pub log: PathBuf,
    pub timings: PathBuf,
    pub models: PathBuf,
    pub checkpoints: PathBuf,
}

impl Outputs {
    pub fn under(dir: &Path) -> Outputs {
        Outputs {
            config: dir.join("config.toml"),
            log: dir.join("log.jsonl"),
            timings: dir.join("timings.jsonl"),
            models: dir.join("models"),
            checkpoints: dir.join("checkpoints"),
        }
    }
}

/// Everything needed to reproduce a run. Written once, before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: FedConfig,
    pub data: DataSource,
    pub train_fraction: f64,
    pub rad: Option<PathBuf>,
    pub started_at: u64,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn write_new(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(hssfl::Error::from)?;
        fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::bad_file(&path, e))
    }
}

/// End-of-run facts, kept apart from the manifest so the latter never
/// changes after training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub finished_at: u64,
    pub rounds_completed: usize,
    pub rounds_planned: usize,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::write(path, text).map_err(CliError::io(path))
}
