use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const RUNS_ENV: &str = "GAZENLU_RUNS";

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
}

/// First 12 hex digits of the SHA-256 of the canonical config JSON.
pub fn config_hash(config: &Value) -> String {
    let d = Sha256::digest(serde_json::to_vec(config).unwrap());
    hex::encode(d)[..12].to_string()
}

impl RunDir {
    /// `out` when given; otherwise `<runs root>/<verb>-<hash>-s<seed>`.
    pub fn create(out: Option<&Path>, verb: &str, config: &Value, seed: u64) -> Result<Self> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root =
                    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(format!("{verb}-{}-s{seed}", config_hash(config)))
            }
        };
        std::fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s)
    }

    /// The only artifact carrying a timestamp.
    pub fn write_manifest(
        &self,
        verb: &str,
        argv: &[String],
        config: &Value,
        artifacts: &[&str],
    ) -> Result<()> {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let m = json!({
            "tool": "gazenlu",
            "version": env!("CARGO_PKG_VERSION"),
            "verb": verb,
            "argv": argv,
            "config": config,
            "config_hash": config_hash(config),
            "artifacts": artifacts,
            "created_unix": secs,
        });
        self.write_json("manifest.json", &m)
    }
}
