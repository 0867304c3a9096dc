//! Run manifest, rewritten atomically after every phase so an interrupted
//! run still leaves a readable record of what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: Status,
    pub config_path: Option<String>,
    pub seed: u64,
    pub version: String,
    /// Artifact name to path relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per finished phase.
    pub timings: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
    pub config: toml::Table,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    phase_start: Option<Instant>,
}

impl Manifest {
    pub fn start(dir: &Path, command: &str, config_path: Option<&Path>, seed: u64, config: toml::Table) -> Result<Manifest> {
        let m = Manifest {
            command: command.to_string(),
            status: Status::Running,
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            notes: BTreeMap::new(),
            config,
            dir: dir.to_path_buf(),
            phase_start: Some(Instant::now()),
        };
        m.save()?;
        Ok(m)
    }

    /// Records the artifacts and the time since the previous phase, then saves.
    pub fn phase(&mut self, name: &str, artifacts: &[(&str, &Path)]) -> Result<()> {
        let now = Instant::now();
        let start = self.phase_start.replace(now).unwrap_or(now);
        self.timings.insert(name.to_string(), (now - start).as_secs_f64());
        for (key, path) in artifacts {
            let rel = path.strip_prefix(&self.dir).unwrap_or(path);
            self.artifacts.insert(key.to_string(), rel.display().to_string());
        }
        self.save()
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    pub fn finish(&mut self, status: Status) -> Result<()> {
        self.status = status;
        self.save()
    }

    fn save(&self) -> Result<()> {
        let text = toml::to_string(self)?;
        let tmp = self.dir.join(format!(".{FILE_NAME}.tmp"));
        fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, self.dir.join(FILE_NAME))?;
        Ok(())
    }
}
