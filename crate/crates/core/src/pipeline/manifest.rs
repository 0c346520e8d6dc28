//! Run manifest. `manifest.json` holds only values that are a function of
//! the configuration and seeds; wall-clock measurements go to `timing.json`
//! so that two identical runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::metrics::MetricsReport;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// One metric report with what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub model: String,
    pub image: String,
    /// sha256 of the checkpoint(s) behind the candidate; empty for bicubic.
    pub checkpoint: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Checkpoint name to sha256.
    pub checkpoints: BTreeMap<String, String>,
    /// Per-stage training record (steps, final losses, pair counts).
    pub training: BTreeMap<String, serde_json::Value>,
    /// Keyed by `<command>/<model>/<image>`.
    pub reports: BTreeMap<String, ReportEntry>,
    /// Denoiser evaluations keyed like `reports`.
    pub calls: BTreeMap<String, usize>,
}

/// Wall-clock seconds keyed like the manifest entries they belong to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T> {
    if path.is_file() {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    } else {
        Ok(T::default())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Loads, updates and writes back the manifest and timing files of one run
/// directory.
pub struct ManifestWriter {
    dir: PathBuf,
    pub manifest: RunManifest,
    pub timing: Timing,
}

impl ManifestWriter {
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        let mut manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.config_hash != config_hash {
            if !manifest.config_hash.is_empty() {
                log::warn!("config changed since the last command; starting a fresh manifest");
            }
            manifest = RunManifest { config_hash: config_hash.to_string(), seed, ..Default::default() };
        }
        let timing = read_json(&dir.join("timing.json"))?;
        Ok(Self { dir: dir.to_path_buf(), manifest, timing })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn record_report(&mut self, key: &str, entry: ReportEntry) {
        self.manifest.reports.insert(key.to_string(), entry);
    }

    pub fn record_calls(&mut self, key: &str, calls: usize) {
        self.manifest.calls.insert(key.to_string(), calls);
    }

    pub fn record_seconds(&mut self, key: &str, seconds: f64) {
        self.timing.seconds.insert(key.to_string(), seconds);
    }

    pub fn record_training(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.manifest.training.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn record_checkpoint(&mut self, name: &str, path: &Path) -> Result<String> {
        let hash = file_sha256(path)?;
        self.manifest.checkpoints.insert(name.to_string(), hash.clone());
        Ok(hash)
    }

    pub fn save(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)?;
        write_json(&self.dir.join("timing.json"), &self.timing)
    }
}
