use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::Result;

/// Files produced by a training or retraining run, relative to nothing:
/// every path is as written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    /// Dataset the run was trained on, so later stages can reload it.
    pub data_dir: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub layer_dirs: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub config_snapshot: PathBuf,
    pub log: Option<PathBuf>,
}

impl RunArtifacts {
    pub const MANIFEST: &'static str = "run.json";

    pub fn latest_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }

    pub fn save(&self) -> Result<()> {
        write_atomic(&self.run_dir.join(Self::MANIFEST), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(run_dir.as_ref().join(Self::MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
