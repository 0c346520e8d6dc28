//! Pipeline configuration: TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::gae::GaeConfig;
use crate::grouping::GroupingConfig;
use crate::hsi::cube::check_scale;
use crate::hsi::PatchSpec;
use crate::loss::{LossConfig, PerceptualBackend};
use crate::train::TrainConfig;

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "HSISR_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { count: 4, height: 64, width: 64, bands: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cube files to ingest; when empty, synthetic scenes are generated.
    pub files: Vec<PathBuf>,
    /// `native` or `raw-bsq`.
    pub format: String,
    pub synthetic: SyntheticSpec,
    /// Images held out for testing. With 0 the training images double as the
    /// test set.
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { files: Vec::new(), format: "native".into(), synthetic: SyntheticSpec::default(), test_count: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub perceptual: PerceptualBackend,
    pub vgg19_weights: Option<PathBuf>,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            lambda3: d.lambda3,
            perceptual: PerceptualBackend::default(),
            vgg19_weights: None,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossConfig {
        LossConfig { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Bands shown as red, green and blue; unset picks three spread bands.
    pub rgb: Option<[usize; 3]>,
    /// Pixel `(x, y)` whose spectrum is exported; unset uses the centre.
    pub curve_pixel: Option<[usize; 2]>,
    /// Upper end of the error-map colour scale.
    pub error_vmax: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rgb: None, curve_pixel: None, error_vmax: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub sizes: Vec<usize>,
    /// Images timed per size and model.
    pub repeats: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { sizes: vec![64, 128, 256], repeats: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scale: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub patch: PatchSpec,
    pub grouping: GroupingConfig,
    pub gae: GaeConfig,
    pub loss: LossSection,
    pub diffusion: DiffusionConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 2,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            patch: PatchSpec::default(),
            grouping: GroupingConfig::default(),
            gae: GaeConfig::default(),
            loss: LossSection::default(),
            diffusion: DiffusionConfig::default(),
            stage1: TrainConfig { lr: 1e-4, ..Default::default() },
            stage2: TrainConfig { lr: 1e-5, ..Default::default() },
            eval: EvalConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    // reuse the TOML grammar for the right-hand side; bare words become strings
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key = value` inside a TOML table, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Layers the file text and then the overrides over the defaults.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale).map_err(|e| Error::Config(e.to_string()))?;
        self.patch.validate(self.scale).map_err(|e| Error::Config(e.to_string()))?;
        self.grouping.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gae.validate()?;
        self.loss.weights().validate()?;
        self.diffusion.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.patch.patch_size % (self.scale * self.gae.latent_downscale) != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be divisible by scale x latent downscale",
                self.patch.patch_size
            )));
        }
        if self.data.files.is_empty() && self.data.synthetic.count <= self.data.test_count {
            return Err(Error::Config("synthetic data leaves no training image".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let json = serde_json::to_vec(&value).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory, placed under `$HSISR_OUTPUT_ROOT` when relative and
    /// the variable is set.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
