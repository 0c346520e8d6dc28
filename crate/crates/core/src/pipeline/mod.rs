//! End-to-end orchestration behind the `hsisr` command line.
//!
//! Every command reads the prepared data and checkpoints from the run
//! directory (`output_dir`), writes its artifacts there and updates
//! `manifest.json` / `timing.json`.

pub mod config;
pub mod data;
pub mod manifest;
pub mod sr;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hsisr_nn::Checkpoint;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, LatentNorm, UNet};
use crate::error::{Error, Result};
use crate::gae::{Gae, GaeTrainer};
use crate::hsi::io::save_false_color_png;
use crate::hsi::{extract_patches, load_cube, save_cube, synth_cube, upsample_bicubic, degrade, normalize, CubeFormat, HsiCube};
use crate::metrics::{error_map, render_error_map, spectral_curve, MetricsReport};
use crate::train::seeded;

pub use config::PipelineConfig;
pub use data::{Dataset, DatasetIndex};
pub use manifest::{ManifestWriter, ReportEntry, RunManifest};
pub use sr::{SrOutput, SrSystem, TraceEvent, Variant};

pub const GAE_CHECKPOINT: &str = "checkpoints/gae.safetensors";
pub const DIFFUSION_CHECKPOINT: &str = "checkpoints/diffusion.safetensors";

fn writer(cfg: &PipelineConfig) -> Result<ManifestWriter> {
    ManifestWriter::open(&cfg.output_path(), &cfg.hash(), cfg.seed)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    ck.save(path)?;
    Ok(())
}

/// Per-image sampling seed derived from the run seed.
pub fn image_seed(seed: u64, image: usize) -> u64 {
    seeded(seed, &format!("infer-{image}")).next_u64()
}

/// Bands used for false-colour renderings.
pub fn rgb_bands(cfg: &PipelineConfig, bands: usize) -> [usize; 3] {
    cfg.eval.rgb.unwrap_or([bands * 5 / 6, bands / 2, bands / 6].map(|b| b.min(bands - 1)))
}

/// Field-wise mean of several reports.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let n = reports.len() as f64;
    let first = reports.first()?;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        mpsnr: avg(|r| r.mpsnr),
        mssim: avg(|r| r.mssim),
        sam: avg(|r| r.sam),
        cc: avg(|r| r.cc),
        rmse: avg(|r| r.rmse),
        ergas: avg(|r| r.ergas),
        scale: first.scale,
    })
}

pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<Dataset> {
    let ds = data::prepare(cfg)?;
    let mut w = writer(cfg)?;
    w.record_training("prepare", &ds.index)?;
    w.save()?;
    Ok(ds)
}

/// Result of stage 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout: Option<MetricsReport>,
    pub checkpoint: String,
}

/// Trains the autoencoder on the training patches. With `resume`, continues
/// from the existing checkpoint up to `stage1.steps`.
pub fn cmd_train_stage1(cfg: &PipelineConfig, resume: bool) -> Result<Stage1Summary> {
    let ds = Dataset::load(cfg)?;
    let patches = ds.patches()?;
    let out = cfg.output_path();
    let ck_path = out.join(GAE_CHECKPOINT);
    let phi = sr::perceptual_extractor(cfg)?;
    let hr: Vec<HsiCube> = patches.iter().map(|p| p.hr.clone()).collect();
    let trainer = if resume && ck_path.is_file() {
        let mut t = GaeTrainer::resume(&Checkpoint::load(&ck_path)?, cfg.stage1.clone(), cfg.loss.weights())?;
        t.model.check_matches(&cfg.gae, &cfg.grouping, ds.index.bands)?;
        log::info!("resuming stage 1 at step {}", t.step);
        t.run(&hr, phi.as_ref())?;
        t
    } else {
        sr::train_stage1(cfg, Variant::Full, &patches)?
    };
    save_checkpoint(&trainer.to_checkpoint()?, &ck_path)?;

    let mut curve = String::from("step,total,l1,sam,gradient,perceptual\n");
    for (i, b) in trainer.history.iter().enumerate() {
        let _ = writeln!(curve, "{},{},{},{},{},{}", i + 1, b.total, b.l1, b.sam, b.gradient, b.perceptual);
    }
    write_text(&out.join("logs/stage1_loss.csv"), &curve)?;

    // reconstruction quality on patches of the held-out images
    let mut reports = Vec::new();
    if !ds.index.test_is_train {
        for pair in &ds.test {
            for p in extract_patches(pair, &cfg.patch)? {
                reports.push(MetricsReport::compute(&p.hr, &trainer.model.reconstruct(&p.hr)?, 1)?);
            }
        }
    }
    let heldout = mean_report(&reports);

    let mut w = writer(cfg)?;
    let hash = w.record_checkpoint("gae", &ck_path)?;
    let summary = Stage1Summary {
        steps: trainer.step,
        final_loss: trainer.history.last().map_or(f64::NAN, |b| b.total),
        heldout,
        checkpoint: hash.clone(),
    };
    w.record_training("stage1", &summary)?;
    if let Some(r) = heldout {
        w.record_report(
            "stage1/gae/heldout-patches",
            ReportEntry { model: "gae".into(), image: "heldout-patches".into(), checkpoint: hash, seed: cfg.seed, report: r },
        );
    }
    w.save()?;
    Ok(summary)
}

fn load_gae(cfg: &PipelineConfig, bands: usize) -> Result<(Gae, Checkpoint)> {
    let path = cfg.output_path().join(GAE_CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Config(format!("no autoencoder checkpoint at {} (run `train-stage1` first)", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let gae = Gae::from_checkpoint(&ck)?;
    gae.check_matches(&cfg.gae, &cfg.grouping, bands)?;
    Ok((gae, ck))
}

fn params_hash(gae: &Gae) -> Result<String> {
    Ok(manifest::sha256_hex(&gae.to_checkpoint()?.to_bytes()?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub steps: usize,
    pub final_loss: f64,
    pub pair_count: usize,
    pub latent_norm: LatentNorm,
    pub gae_params_before: String,
    pub gae_params_after: String,
    pub checkpoint: String,
}

/// Trains the conditional denoiser on latent pairs of the frozen autoencoder.
pub fn cmd_train_stage2(cfg: &PipelineConfig) -> Result<Stage2Summary> {
    let ds = Dataset::load(cfg)?;
    let patches = ds.patches()?;
    let (gae, _) = load_gae(cfg, ds.index.bands)?;
    let before = params_hash(&gae)?;
    let st = sr::train_stage2(cfg, Variant::Full, Some(gae), &patches)?;
    let after = params_hash(st.system.gae.as_ref().expect("latent variant"))?;
    if before != after {
        return Err(Error::Numerical { step: st.history.len(), what: "autoencoder weights changed during stage 2".into() });
    }
    let out = cfg.output_path();
    let ck_path = out.join(DIFFUSION_CHECKPOINT);
    save_checkpoint(&st.checkpoint, &ck_path)?;
    let mut curve = String::from("step,eps_loss\n");
    for (i, l) in st.history.iter().enumerate() {
        let _ = writeln!(curve, "{},{l}", i + 1);
    }
    write_text(&out.join("logs/stage2_loss.csv"), &curve)?;

    let mut w = writer(cfg)?;
    let hash = w.record_checkpoint("diffusion", &ck_path)?;
    let summary = Stage2Summary {
        steps: st.history.len(),
        final_loss: st.history.last().copied().unwrap_or(f64::NAN),
        pair_count: st.pair_count,
        latent_norm: st.system.norm,
        gae_params_before: before,
        gae_params_after: after,
        checkpoint: hash,
    };
    w.record_training("stage2", &summary)?;
    w.save()?;
    Ok(summary)
}

/// Loads the trained system and checks it against the configuration.
pub fn load_system(cfg: &PipelineConfig, bands: usize) -> Result<(SrSystem, String)> {
    let out = cfg.output_path();
    let (_, gae_ck) = load_gae(cfg, bands)?;
    let path = out.join(DIFFUSION_CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Config(format!("no diffusion checkpoint at {} (run `train-stage2` first)", path.display())));
    }
    let diff_ck = Checkpoint::load(&path)?;
    let system = SrSystem::from_checkpoints(Some(&gae_ck), &diff_ck)?;
    if system.unet.config != cfg.diffusion {
        return Err(Error::CheckpointMismatch("diffusion settings differ from the configuration".into()));
    }
    if system.scale != cfg.scale {
        return Err(Error::CheckpointMismatch(format!("checkpoint scale {} vs configured {}", system.scale, cfg.scale)));
    }
    let id = format!("{}+{}", manifest::file_sha256(&out.join(GAE_CHECKPOINT))?, manifest::file_sha256(&path)?);
    Ok((system, id))
}

/// One inferred image.
#[derive(Clone, Debug)]
pub struct InferRecord {
    pub image: String,
    pub path: PathBuf,
    pub calls: usize,
    pub seconds: f64,
}

pub fn sr_path(cfg: &PipelineConfig, k: usize) -> PathBuf {
    cfg.output_path().join(format!("sr/test_{k:03}.cube"))
}

/// Super-resolves `input` (or every test image when `None`).
pub fn cmd_infer(cfg: &PipelineConfig, input: Option<&Path>, output: Option<&Path>) -> Result<Vec<InferRecord>> {
    let jobs: Vec<(String, HsiCube, PathBuf)> = match input {
        Some(p) => {
            let lr = load_cube(p, CubeFormat::Native)?;
            let stem = p.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            let dest = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_path().join(format!("sr/{stem}_sr.cube")));
            vec![(stem, lr, dest)]
        }
        None => {
            let ds = Dataset::load(cfg)?;
            ds.test.iter().enumerate().map(|(k, p)| (format!("test_{k:03}"), p.lr.clone(), sr_path(cfg, k))).collect()
        }
    };
    let bands = jobs.first().map_or(0, |j| j.1.bands());
    let (system, ck_id) = load_system(cfg, bands)?;
    let mut w = writer(cfg)?;
    let mut records = Vec::new();
    for (k, (name, lr, dest)) in jobs.into_iter().enumerate() {
        lr.check_processable()?;
        let out = system.super_resolve(&lr, image_seed(cfg.seed, k))?;
        let expected = system.expected_calls(lr.bands());
        if out.calls != expected {
            return Err(Error::Numerical { step: 0, what: format!("{} denoiser calls, expected {expected}", out.calls) });
        }
        ensure_parent(&dest)?;
        save_cube(&out.cube, &dest)?;
        log::info!("{name}: {} calls in {:.2}s -> {}", out.calls, out.seconds, dest.display());
        w.record_calls(&format!("infer/full/{name}"), out.calls);
        w.record_seconds(&format!("infer/full/{name}"), out.seconds);
        w.record_training(&format!("infer/{name}"), serde_json::json!({ "checkpoint": ck_id, "seed": image_seed(cfg.seed, k) }))?;
        records.push(InferRecord { image: name, path: dest, calls: out.calls, seconds: out.seconds });
    }
    w.save()?;
    Ok(records)
}

/// Writes false-colour renderings, error maps and a spectral curve for one
/// reference and a set of named candidates.
pub fn render_comparison(cfg: &PipelineConfig, dir: &Path, image: &str, reference: &HsiCube, candidates: &[(&str, &HsiCube)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rgb = rgb_bands(cfg, reference.bands());
    save_false_color_png(reference, rgb, dir.join(format!("{image}_reference.png")))?;
    for (name, cube) in candidates {
        save_false_color_png(cube, rgb, dir.join(format!("{image}_{name}.png")))?;
        let map = error_map(reference, cube, rgb)?;
        render_error_map(&map, cfg.eval.error_vmax)
            .save(dir.join(format!("{image}_{name}_error.png")))
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    let (h, w) = reference.spatial();
    let [x, y] = cfg.eval.curve_pixel.unwrap_or([w / 2, h / 2]);
    let mut curves = vec![spectral_curve(reference, x, y)?];
    for (_, cube) in candidates {
        curves.push(spectral_curve(cube, x, y)?);
    }
    let mut text = String::from("band,reference");
    for (name, _) in candidates {
        let _ = write!(text, ",{name}");
    }
    text.push('\n');
    for b in 0..reference.bands() {
        let row: Vec<String> = curves.iter().map(|c| c[b].to_string()).collect();
        let _ = writeln!(text, "{b},{}", row.join(","));
    }
    write_text(&dir.join(format!("{image}_curve_x{x}_y{y}.csv")), &text)
}

fn csv_line(model: &str, image: &str, r: &MetricsReport) -> String {
    format!("{model},{image},{}\n", r.csv_row())
}

/// Scores the inferred test images against their references, together with
/// the bicubic baseline, and renders the comparison figures.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Vec<ReportEntry>> {
    let ds = Dataset::load(cfg)?;
    let out = cfg.output_path();
    let mut w = writer(cfg)?;
    let ck = format!(
        "{}+{}",
        w.manifest.checkpoints.get("gae").cloned().unwrap_or_default(),
        w.manifest.checkpoints.get("diffusion").cloned().unwrap_or_default()
    );
    let mut csv = format!("model,image,{}\n", MetricsReport::csv_header());
    let mut entries = Vec::new();
    for (k, pair) in ds.test.iter().enumerate() {
        let image = format!("test_{k:03}");
        let path = sr_path(cfg, k);
        if !path.is_file() {
            return Err(Error::Config(format!("missing {} (run `infer` first)", path.display())));
        }
        let sr = load_cube(&path, CubeFormat::Native)?;
        let bicubic = upsample_bicubic(&pair.lr, pair.scale)?;
        for (model, cand, id) in [("full", &sr, ck.clone()), ("bicubic", &bicubic, String::new())] {
            let report = MetricsReport::compute(&pair.hr, cand, pair.scale)?;
            csv.push_str(&csv_line(model, &image, &report));
            let entry = ReportEntry { model: model.into(), image: image.clone(), checkpoint: id, seed: image_seed(cfg.seed, k), report };
            w.record_report(&format!("evaluate/{model}/{image}"), entry.clone());
            entries.push(entry);
        }
        render_comparison(cfg, &out.join("eval"), &image, &pair.hr, &[("full", &sr), ("bicubic", &bicubic)])?;
    }
    write_text(&out.join("eval/metrics.csv"), &csv)?;
    w.save()?;
    Ok(entries)
}

/// Scores an arbitrary reference/candidate pair.
pub fn evaluate_files(reference: &Path, candidate: &Path, scale: usize) -> Result<MetricsReport> {
    let r = load_cube(reference, CubeFormat::Native)?;
    let c = load_cube(candidate, CubeFormat::Native)?;
    MetricsReport::compute(&r, &c, scale)
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub image: String,
    pub report: MetricsReport,
    pub calls: usize,
    pub seconds: f64,
}

/// Trains and evaluates every variant with the same data, seeds and budgets.
pub fn cmd_ablate(cfg: &PipelineConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let ds = Dataset::load(cfg)?;
    let patches = ds.patches()?;
    let out = cfg.output_path().join("ablation");
    let mut w = writer(cfg)?;
    let mut rows = Vec::new();
    let mut csv = format!("variant,image,{},calls\n", MetricsReport::csv_header());
    for (k, pair) in ds.test.iter().enumerate() {
        let report = MetricsReport::compute(&pair.hr, &upsample_bicubic(&pair.lr, pair.scale)?, pair.scale)?;
        let image = format!("test_{k:03}");
        let _ = writeln!(csv, "bicubic,{image},{},0", report.csv_row());
        rows.push(AblationRow { variant: "bicubic".into(), image, report, calls: 0, seconds: 0.0 });
    }
    for &variant in variants {
        log::info!("ablation: training {variant}");
        let trained = sr::train_system(cfg, variant, &patches)?;
        let dir = out.join(variant.label());
        let mut ids = Vec::new();
        if let Some(ck) = &trained.gae_checkpoint {
            save_checkpoint(ck, &dir.join("gae.safetensors"))?;
            ids.push(w.record_checkpoint(&format!("ablation/{variant}/gae"), &dir.join("gae.safetensors"))?);
        }
        save_checkpoint(&trained.diffusion_checkpoint, &dir.join("diffusion.safetensors"))?;
        ids.push(w.record_checkpoint(&format!("ablation/{variant}/diffusion"), &dir.join("diffusion.safetensors"))?);
        w.record_training(&format!("ablation/{variant}"), &trained.summary)?;
        for (k, pair) in ds.test.iter().enumerate() {
            let image = format!("test_{k:03}");
            let seed = image_seed(cfg.seed, k);
            let res = trained.system.super_resolve(&pair.lr, seed)?;
            let report = MetricsReport::compute(&pair.hr, &res.cube, pair.scale)?;
            let key = format!("ablate/{variant}/{image}");
            w.record_report(&key, ReportEntry { model: variant.label().into(), image: image.clone(), checkpoint: ids.join("+"), seed, report });
            w.record_calls(&key, res.calls);
            w.record_seconds(&key, res.seconds);
            let _ = writeln!(csv, "{variant},{image},{},{}", report.csv_row(), res.calls);
            rows.push(AblationRow { variant: variant.label().into(), image, report, calls: res.calls, seconds: res.seconds });
        }
    }
    write_text(&out.join("table.csv"), &csv)?;
    w.save()?;
    Ok(rows)
}

/// An untrained system with the configured architecture; inference cost does
/// not depend on the weights.
pub fn fresh_system(cfg: &PipelineConfig, variant: Variant, bands: usize) -> Result<SrSystem> {
    let (grouping, gae_cfg) = variant.adjust(cfg, bands);
    let gae = if variant.uses_gae() { Some(Gae::new(gae_cfg, grouping, bands, cfg.seed)?) } else { None };
    let channels = match variant {
        Variant::DiffPb => 1,
        Variant::DiffFb => bands,
        _ => cfg.gae.latent_channels,
    };
    let unet = UNet::new(cfg.diffusion.clone(), channels, cfg.seed)?;
    let schedule = build_schedule(&cfg.diffusion)?;
    Ok(SrSystem { variant, scale: cfg.scale, gae, unet, norm: LatentNorm::default(), schedule })
}

/// Rows of the timing table.
pub const BENCHMARK_MODELS: [(&str, Variant); 3] = [("ours", Variant::Full), ("diff-PB", Variant::DiffPb), ("diff-FB", Variant::DiffFb)];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub size: usize,
    pub seconds_per_image: f64,
    pub calls_per_image: usize,
}

/// Times inference of the three model families on synthetic `size`×`size`
/// outputs with the configured band count.
pub fn cmd_benchmark_time(cfg: &PipelineConfig) -> Result<Vec<TimingRow>> {
    let bands = Dataset::load(cfg).map_or(cfg.data.synthetic.bands, |d| d.index.bands);
    let mut w = writer(cfg)?;
    let mut rows = Vec::new();
    let mut csv = String::from("model,size,seconds_per_image,calls_per_image\n");
    for &size in &cfg.benchmark.sizes {
        let hr = normalize(&synth_cube(size, size, bands, cfg.seed)?)?;
        let lr = degrade(&hr, cfg.scale)?.lr;
        for (name, variant) in BENCHMARK_MODELS {
            let system = fresh_system(cfg, variant, bands)?;
            let mut seconds = 0.0;
            let mut calls = 0;
            for r in 0..cfg.benchmark.repeats.max(1) {
                let res = system.super_resolve(&lr, image_seed(cfg.seed, r))?;
                seconds += res.seconds;
                calls += res.calls;
            }
            let n = cfg.benchmark.repeats.max(1);
            let row = TimingRow { model: name.into(), size, seconds_per_image: seconds / n as f64, calls_per_image: calls / n };
            log::info!("{name} {size}x{size}: {:.3}s/image, {} calls", row.seconds_per_image, row.calls_per_image);
            let _ = writeln!(csv, "{name},{size},{},{}", row.seconds_per_image, row.calls_per_image);
            let key = format!("benchmark/{name}/{size}");
            w.record_calls(&key, row.calls_per_image);
            w.record_seconds(&key, row.seconds_per_image);
            rows.push(row);
        }
    }
    write_text(&cfg.output_path().join("benchmark/time.csv"), &csv)?;
    w.save()?;
    Ok(rows)
}
