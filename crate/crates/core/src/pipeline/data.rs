//! Dataset preparation and loading.
//!
//! Layout under `<output>/data`:
//!
//! ```text
//! index.json
//! train/hr_000.cube  train/lr_000.cube ...
//! test/hr_000.cube   test/lr_000.cube  ...
//! patches.safetensors   (hr.{i} / lr.{i}, training patches)
//! ```

use std::path::{Path, PathBuf};

use hsisr_nn::Checkpoint;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::io::META_SOURCE;
use crate::hsi::patches::tiles_along;
use crate::hsi::{degrade, extract_patches, load_cube, normalize, save_cube, synth_cube, CubeFormat, HsiCube, ImagePair};
use crate::train::seeded;

use super::config::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub scale: usize,
    pub bands: usize,
    /// Source names of the training images, in file order.
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// True when the test split reuses the training images.
    pub test_is_train: bool,
    pub patch_count: usize,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub train: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

pub fn data_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_path().join("data")
}

/// Expected patch count for one image, before augmentation.
pub fn patches_per_image(h: usize, w: usize, cfg: &PipelineConfig) -> usize {
    tiles_along(h, cfg.patch.patch_size, cfg.patch.stride) * tiles_along(w, cfg.patch.patch_size, cfg.patch.stride)
}

fn source_cubes(cfg: &PipelineConfig) -> Result<Vec<HsiCube>> {
    if cfg.data.files.is_empty() {
        let s = &cfg.data.synthetic;
        return (0..s.count)
            .map(|i| {
                let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i as u64);
                Ok(synth_cube(s.height, s.width, s.bands, seed)?.with_meta(META_SOURCE, format!("synthetic-{i}")))
            })
            .collect();
    }
    let format: CubeFormat = cfg.data.format.parse()?;
    cfg.data
        .files
        .iter()
        .map(|p| {
            let cube = load_cube(p, format)?;
            Ok(if cube.meta.contains_key(META_SOURCE) { cube } else { cube.with_meta(META_SOURCE, p.display()) })
        })
        .collect()
}

fn cube_name(dir: &Path, kind: &str, i: usize) -> PathBuf {
    dir.join(format!("{kind}_{i:03}.cube"))
}

/// Ingests or synthesizes the cubes, normalizes them, splits them with the
/// `split` seed stream, degrades every cube at the configured scale and
/// writes the pairs together with the training patches.
pub fn prepare(cfg: &PipelineConfig) -> Result<Dataset> {
    let mut cubes = source_cubes(cfg)?;
    let bands = cubes.first().ok_or_else(|| Error::Config("no input cubes".into()))?.bands();
    for c in &cubes {
        c.check_processable()?;
        if c.bands() != bands {
            return Err(Error::Shape(format!("input cubes disagree on band count ({} vs {bands})", c.bands())));
        }
    }
    let test_count = cfg.data.test_count;
    if test_count > 0 && test_count >= cubes.len() {
        return Err(Error::Config(format!("test_count {test_count} leaves no training image out of {}", cubes.len())));
    }
    let mut order: Vec<usize> = (0..cubes.len()).collect();
    order.shuffle(&mut seeded(cfg.seed, "split"));
    let test_ids: Vec<usize> = order[..test_count].to_vec();
    let mut train_ids: Vec<usize> = order[test_count..].to_vec();
    train_ids.sort_unstable();
    let mut test_ids = if test_count == 0 { train_ids.clone() } else { test_ids };
    test_ids.sort_unstable();

    let mut pairs = Vec::with_capacity(cubes.len());
    for cube in cubes.drain(..) {
        pairs.push(degrade(&normalize(&cube)?, cfg.scale)?);
    }
    let name = |i: usize| pairs[i].hr.meta.get(META_SOURCE).cloned().unwrap_or_else(|| format!("image-{i}"));

    let dir = data_dir(cfg);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, ids, out) in [("train", &train_ids, &mut train), ("test", &test_ids, &mut test)] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub)?;
        for (k, &i) in ids.iter().enumerate() {
            save_cube(&pairs[i].hr, cube_name(&sub, "hr", k))?;
            save_cube(&pairs[i].lr, cube_name(&sub, "lr", k))?;
            out.push(pairs[i].clone());
        }
    }
    let patches = training_patches(cfg, &train)?;
    let mut ck = Checkpoint::new();
    for (i, p) in patches.iter().enumerate() {
        ck.insert(format!("hr.{i}"), p.hr.to_tensor());
        ck.insert(format!("lr.{i}"), p.lr.to_tensor());
    }
    ck.set_meta("scale", cfg.scale);
    ck.save(dir.join("patches.safetensors"))?;
    let index = DatasetIndex {
        seed: cfg.seed,
        scale: cfg.scale,
        bands,
        train: train_ids.iter().map(|&i| name(i)).collect(),
        test: test_ids.iter().map(|&i| name(i)).collect(),
        test_is_train: test_count == 0,
        patch_count: patches.len(),
    };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    log::info!("prepared {} train / {} test images, {} patches in {}", train.len(), test.len(), patches.len(), dir.display());
    Ok(Dataset { dir, index, train, test })
}

pub fn training_patches(cfg: &PipelineConfig, train: &[ImagePair]) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for p in train {
        out.extend(extract_patches(p, &cfg.patch)?);
    }
    if out.is_empty() {
        return Err(Error::Patch("training images yield no patches".into()));
    }
    Ok(out)
}

fn load_split(dir: &Path, count: usize, scale: usize) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|k| {
            let hr = load_cube(cube_name(dir, "hr", k), CubeFormat::Native)?;
            let lr = load_cube(cube_name(dir, "lr", k), CubeFormat::Native)?;
            ImagePair::new(hr, lr, scale)
        })
        .collect()
}

impl Dataset {
    /// Opens a prepared dataset; fails when `prepare` has not been run.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let dir = data_dir(cfg);
        let index_path = dir.join("index.json");
        if !index_path.is_file() {
            return Err(Error::Config(format!("no prepared dataset at {} (run `prepare` first)", dir.display())));
        }
        let index: DatasetIndex = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
        if index.scale != cfg.scale {
            return Err(Error::Config(format!("dataset was prepared at scale {}, config asks for {}", index.scale, cfg.scale)));
        }
        let train = load_split(&dir.join("train"), index.train.len(), index.scale)?;
        let test = load_split(&dir.join("test"), index.test.len(), index.scale)?;
        Ok(Self { dir, index, train, test })
    }

    pub fn patches(&self) -> Result<Vec<ImagePair>> {
        let ck = Checkpoint::load(self.dir.join("patches.safetensors"))?;
        (0..self.index.patch_count)
            .map(|i| {
                let get = |k: String| ck.get(&k).ok_or_else(|| Error::Config(format!("patch file lacks `{k}`")));
                let hr = HsiCube::from_tensor(get(format!("hr.{i}"))?, 0)?;
                let lr = HsiCube::from_tensor(get(format!("lr.{i}"))?, 0)?;
                ImagePair::new(hr, lr, self.index.scale)
            })
            .collect()
    }
}
