//! Per-run bookkeeping shared by every command.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use advlab::bench_stats::platform_string;
use advlab::config::Config;
use advlab::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Fixed artifact layout under `<out>/<run-id>/`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, cfg: &Config) -> Self {
        Self {
            root: out.join(cfg.run_id()),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn tables(&self) -> PathBuf {
        self.root.join("tables")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn replay(&self) -> PathBuf {
        self.root.join("replay")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.logs(), self.tables(), self.plots()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Path relative to the run root, for the manifest.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub detector: u64,
    pub eval_base: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandStamp {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_sha256: String,
    pub source_revision: String,
    pub seeds: Seeds,
    /// Checkpoint files relative to the run root.
    pub checkpoints: Vec<String>,
    /// Every other emitted result file, relative to the run root.
    pub artifacts: Vec<String>,
    pub platform: String,
    pub created_unix: u64,
    pub history: Vec<CommandStamp>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn source_revision() -> String {
    option_env!("ADVLAB_SOURCE_REV").unwrap_or("unknown").to_string()
}

impl RunManifest {
    pub fn new(cfg: &Config) -> Self {
        Self {
            run_id: cfg.run_id(),
            config_sha256: cfg.digest(),
            source_revision: source_revision(),
            seeds: Seeds {
                train: cfg.seed,
                detector: cfg.detector.seed,
                eval_base: cfg.eval.seed_base,
            },
            checkpoints: Vec::new(),
            artifacts: Vec::new(),
            platform: platform_string(),
            created_unix: now_unix(),
            history: Vec::new(),
        }
    }

    /// The run's manifest, created if absent. A manifest written under a
    /// different configuration is a configuration error.
    pub fn open(layout: &RunLayout, cfg: &Config) -> Result<Self> {
        let path = layout.manifest();
        if !path.exists() {
            return Ok(Self::new(cfg));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.config_sha256 != cfg.digest() {
            return Err(Error::Config(format!(
                "{} belongs to a different configuration; use --force to start over",
                layout.root.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, layout: &RunLayout) -> Result<()> {
        let path = layout.manifest();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn add_checkpoint(&mut self, rel: String) {
        if !self.checkpoints.contains(&rel) {
            self.checkpoints.push(rel);
        }
    }

    pub fn add_artifact(&mut self, rel: String) {
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }
}
