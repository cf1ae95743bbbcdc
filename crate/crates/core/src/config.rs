//! Run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const THREADS_ENV: &str = "ERRMAP_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    /// Dataset directory (holding `manifest.json`).
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a JSON file; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.scene.validate()
    }
}

/// Writes `value` as pretty JSON to `<dir>/config.json`.
pub fn echo_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO_FILE), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Worker count from `ERRMAP_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
