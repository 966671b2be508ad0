//! Timestamped run directories with a reproducibility manifest and
//! remove-on-failure semantics for partial outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const OUT_ENV: &str = "SONGLAB_OUT";

/// Output root precedence: `--out` flag, then SONGLAB_OUT, then the config
/// file, then ./runs.
pub fn resolve_out_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    cfg.out_root.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

pub fn version_string() -> String {
    format!("v{}-songlab", env!("CARGO_PKG_VERSION"))
}

/// A run directory that deletes itself unless the command finishes. The
/// manifest and effective config are written at creation so even a kept
/// directory from a later failure names its inputs.
pub struct RunDir {
    path: PathBuf,
    armed: bool,
}

impl RunDir {
    pub fn create(out_root: &Path, command: &str, cfg: &RunConfig) -> Result<RunDir> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).expect("clock").as_secs();
        let mut path = out_root.join(format!("{secs}-{command}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = out_root.join(format!("{secs}-{command}-{n}"));
        }
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run dir {}", path.display()))?;
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: format!("{:016x}", cfg.hash()),
            seed: cfg.seed,
            version: version_string(),
        };
        std::fs::write(path.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(path.join("config.json"), cfg.to_json())?;
        Ok(RunDir { path, armed: true })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Call exactly once, after every artifact is written and checked.
    pub fn keep(mut self) -> PathBuf {
        self.armed = false;
        self.path.clone()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.armed {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }
}
