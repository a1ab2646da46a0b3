//! Run-directory layout and artifact bookkeeping: config snapshot, metrics
//! stream, checkpoints, and a MANIFEST of artifact hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::{ConfigErrors, RunConfig};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.json";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "MANIFEST";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        RunDir { root }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_SNAPSHOT)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    /// Prepare the directory for a fresh run. A non-empty directory is
    /// refused unless `force` wipes it.
    pub fn prepare_fresh(&self, force: bool) -> Result<()> {
        if self.root.exists() {
            let non_empty = fs::read_dir(&self.root)
                .with_context(|| format!("cannot read {}", self.root.display()))?
                .next()
                .is_some();
            if non_empty {
                if !force {
                    return Err(ConfigErrors(vec![format!(
                        "output directory {} is not empty; pass --resume to continue or --force to overwrite",
                        self.root.display()
                    )])
                    .into());
                }
                fs::remove_dir_all(&self.root)
                    .with_context(|| format!("cannot clear {}", self.root.display()))?;
            }
        }
        fs::create_dir_all(self.checkpoints())
            .with_context(|| format!("cannot create {}", self.checkpoints().display()))?;
        Ok(())
    }

    pub fn write_config_snapshot(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.config_path(), cfg.canonical_text())
            .with_context(|| format!("cannot write {}", self.config_path().display()))
    }

    /// Load the snapshot written when the run started.
    pub fn read_config_snapshot(&self) -> Result<RunConfig> {
        let path = self.config_path();
        let text = fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config snapshot {}", path.display()))?;
        Ok(cfg)
    }

    /// Newest checkpoint by step number.
    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.checkpoints();
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir)
            .with_context(|| format!("cannot read {}", dir.display()))?
        {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(step) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                best = Some((step, path));
            }
        }
        best.map(|(_, p)| p)
            .with_context(|| format!("no checkpoints found under {}", dir.display()))
    }

    /// Drop metrics records beyond `step` so a resumed stream continues
    /// exactly from the checkpoint.
    pub fn truncate_metrics_after(&self, step: u64) -> Result<()> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&path)?;
        let mut kept = String::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: serde_json::Value = serde_json::from_str(line)
                .with_context(|| format!("corrupt metrics line in {}", path.display()))?;
            let s = rec.get("step").and_then(|v| v.as_u64()).unwrap_or(u64::MAX);
            if s <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept)?;
        Ok(())
    }

    /// Write the MANIFEST: one `sha256  relative-path` line per artifact.
    pub fn write_manifest(&self) -> Result<()> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut add = |rel: String, path: &Path| -> Result<()> {
            if path.is_file() {
                entries.push((hash_file(path)?, rel));
            }
            Ok(())
        };
        add(CONFIG_SNAPSHOT.into(), &self.config_path())?;
        add(METRICS_FILE.into(), &self.metrics_path())?;
        if self.checkpoints().is_dir() {
            let mut ckpts: Vec<PathBuf> = fs::read_dir(self.checkpoints())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "ckpt").unwrap_or(false))
                .collect();
            ckpts.sort();
            for p in ckpts {
                let rel = format!(
                    "{CHECKPOINT_DIR}/{}",
                    p.file_name().unwrap().to_string_lossy()
                );
                add(rel, &p)?;
            }
        }
        let mut out = String::new();
        for (hash, rel) in entries {
            out.push_str(&hash);
            out.push_str("  ");
            out.push_str(&rel);
            out.push('\n');
        }
        fs::write(self.root.join(MANIFEST_FILE), out)?;
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}
