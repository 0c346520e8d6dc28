//! Super-resolution systems: the grouped latent model and the ablation
//! variants, their training from HR/LR patch pairs, and inference.

use std::time::Instant;

use hsisr_nn::{Checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, reverse_sample, Denoiser, DiffusionTrainer, LatentNorm, LatentPair, NoiseSchedule, UNet};
use crate::error::{Error, Result};
use crate::gae::{Gae, GaeTrainer, LatentList};
use crate::grouping::GroupingConfig;
use crate::hsi::{upsample_bicubic, HsiCube, ImagePair};
use crate::loss::{build_extractor, FeatureExtractor};
use crate::train::seeded;

use super::config::PipelineConfig;

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-GD")]
    NoGd,
    #[serde(rename = "no-GS")]
    NoGs,
    #[serde(rename = "diff-PB")]
    DiffPb,
    #[serde(rename = "diff-FB")]
    DiffFb,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoGd, Variant::NoGs, Variant::DiffPb, Variant::DiffFb];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGd => "no-GD",
            Variant::NoGs => "no-GS",
            Variant::DiffPb => "diff-PB",
            Variant::DiffFb => "diff-FB",
        }
    }

    pub fn uses_gae(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGd | Variant::NoGs)
    }

    /// Grouping and autoencoder settings this variant trains with.
    pub fn adjust(self, cfg: &PipelineConfig, bands: usize) -> (GroupingConfig, crate::gae::GaeConfig) {
        let mut gae = cfg.gae.clone();
        let mut grouping = cfg.grouping;
        match self {
            Variant::NoGd => gae.global_decoder = false,
            Variant::NoGs => grouping = GroupingConfig::single(bands),
            _ => {}
        }
        (grouping, gae)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, no-GD, no-GS, diff-PB or diff-FB)")))
    }
}

/// One observable step of inference, recorded for fidelity checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceEvent {
    Upsample { scale: usize },
    Encode { groups: usize },
    Sample { unit: usize, calls: usize },
    Decode { bands: usize },
}

pub struct SrSystem {
    pub variant: Variant,
    pub scale: usize,
    pub gae: Option<Gae>,
    pub unet: UNet,
    pub norm: LatentNorm,
    pub schedule: NoiseSchedule,
}

/// Result of one inference run.
pub struct SrOutput {
    pub cube: HsiCube,
    pub calls: usize,
    pub seconds: f64,
    pub trace: Vec<TraceEvent>,
}

fn band_tensor(cube: &HsiCube, b: usize) -> Tensor {
    let (h, w) = cube.spatial();
    Tensor::from_vec([1, 1, h, w], cube.band(b).iter().copied().collect())
}

impl SrSystem {
    /// Denoiser evaluations needed for one `bands`-band image.
    pub fn expected_calls(&self, bands: usize) -> usize {
        let t = self.schedule.steps();
        match self.variant {
            Variant::DiffPb => t * bands,
            Variant::DiffFb => t,
            _ => t * self.gae.as_ref().map_or(0, Gae::group_count),
        }
    }

    fn sample_unit(&self, cond: &Tensor, seed: u64, unit: usize) -> Result<Tensor> {
        let mut rng = seeded(seed, &format!("sample-{unit}"));
        let z = reverse_sample(&self.unet, &self.norm.apply(cond), &self.schedule, &mut rng)?;
        Ok(self.norm.invert(&z))
    }

    /// Super-resolves `lr`. For the latent variants this is: bicubic
    /// upsampling, encoding into one latent per group, an independent
    /// reverse diffusion per latent conditioned on it, and decoding.
    pub fn super_resolve(&self, lr: &HsiCube, seed: u64) -> Result<SrOutput> {
        let start = Instant::now();
        let calls_before = self.unet.calls();
        let mut trace = vec![TraceEvent::Upsample { scale: self.scale }];
        let up = upsample_bicubic(lr, self.scale)?;
        let cube = match self.variant {
            Variant::DiffPb => {
                let mut bands = Vec::with_capacity(up.bands());
                for b in 0..up.bands() {
                    let before = self.unet.calls();
                    bands.push(self.sample_unit(&band_tensor(&up, b), seed, b)?);
                    trace.push(TraceEvent::Sample { unit: b, calls: self.unet.calls() - before });
                }
                let (h, w) = up.spatial();
                HsiCube::from_fn(h, w, up.bands(), |(y, x, b)| bands[b].data()[y * w + x])?
            }
            Variant::DiffFb => {
                let before = self.unet.calls();
                let z = self.sample_unit(&up.to_tensor(), seed, 0)?;
                trace.push(TraceEvent::Sample { unit: 0, calls: self.unet.calls() - before });
                HsiCube::from_tensor(&z, 0)?
            }
            _ => {
                let gae = self.gae.as_ref().ok_or_else(|| Error::Config("latent variant without autoencoder".into()))?;
                let z_lr = gae.encode(&up)?;
                trace.push(TraceEvent::Encode { groups: z_lr.len() });
                let mut latents = Vec::with_capacity(z_lr.len());
                for (i, cond) in z_lr.latents.iter().enumerate() {
                    let before = self.unet.calls();
                    latents.push(self.sample_unit(cond, seed, i)?);
                    trace.push(TraceEvent::Sample { unit: i, calls: self.unet.calls() - before });
                }
                let out = gae.decode(&LatentList { latents, plan: z_lr.plan, bands: z_lr.bands })?;
                trace.push(TraceEvent::Decode { bands: out.bands() });
                out
            }
        };
        let mut cube = cube;
        cube.meta = lr.meta.clone();
        cube.meta.insert("sr_variant".into(), self.variant.label().into());
        Ok(SrOutput { cube, calls: self.unet.calls() - calls_before, seconds: start.elapsed().as_secs_f64(), trace })
    }

    pub fn diffusion_checkpoint(&self, trainer_ck: Option<Checkpoint>) -> Result<Checkpoint> {
        let mut ck = match trainer_ck {
            Some(ck) => ck,
            None => self.unet.to_checkpoint()?,
        };
        ck.set_meta("variant", self.variant.label());
        ck.set_meta("scale", self.scale);
        ck.set_meta("latent_norm", serde_json::to_string(&self.norm)?);
        Ok(ck)
    }

    pub fn from_checkpoints(gae: Option<&Checkpoint>, diffusion: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| diffusion.meta(k).ok_or_else(|| Error::CheckpointMismatch(format!("diffusion checkpoint lacks `{k}`")));
        let variant: Variant = meta("variant")?.parse()?;
        let scale = meta("scale")?.parse().map_err(|_| Error::CheckpointMismatch("bad `scale`".into()))?;
        let norm: LatentNorm = serde_json::from_str(meta("latent_norm")?)?;
        let unet = UNet::from_checkpoint(diffusion)?;
        let gae = match (variant.uses_gae(), gae) {
            (true, Some(ck)) => Some(Gae::from_checkpoint(ck)?),
            (true, None) => return Err(Error::CheckpointMismatch(format!("variant {variant} needs an autoencoder checkpoint"))),
            (false, _) => None,
        };
        if let Some(g) = &gae {
            if g.config.latent_channels != unet.channels {
                return Err(Error::CheckpointMismatch(format!(
                    "autoencoder latents have {} channels, denoiser expects {}",
                    g.config.latent_channels, unet.channels
                )));
            }
        }
        let schedule = build_schedule(&unet.config)?;
        Ok(Self { variant, scale, gae, unet, norm, schedule })
    }
}

/// Training-time record of one variant.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub stage1_steps: usize,
    pub stage1_final_loss: Option<f64>,
    pub stage2_steps: usize,
    pub stage2_final_loss: f64,
    pub pair_count: usize,
}

fn mean_tail(v: &[f64], n: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Conditioning/target pairs for the diffusion stage. Latent variants pair
/// `encode(upsample(lr))` with `encode(hr)` group by group; the pixel
/// variants pair upsampled LR with HR directly (per band for diff-PB).
pub fn diffusion_pairs(variant: Variant, gae: Option<&Gae>, pairs: &[ImagePair]) -> Result<Vec<LatentPair>> {
    let mut out = Vec::new();
    for p in pairs {
        let up = upsample_bicubic(&p.lr, p.scale)?;
        match variant {
            Variant::DiffPb => {
                for b in 0..p.hr.bands() {
                    out.push(LatentPair { cond: band_tensor(&up, b), target: band_tensor(&p.hr, b) });
                }
            }
            Variant::DiffFb => out.push(LatentPair { cond: up.to_tensor(), target: p.hr.to_tensor() }),
            _ => {
                let gae = gae.ok_or_else(|| Error::Config("latent variant without autoencoder".into()))?;
                let (zl, zh) = (gae.encode(&up)?, gae.encode(&p.hr)?);
                for (cond, target) in zl.latents.into_iter().zip(zh.latents) {
                    out.push(LatentPair { cond, target });
                }
            }
        }
    }
    Ok(out)
}

pub struct TrainedSystem {
    pub system: SrSystem,
    pub summary: TrainingSummary,
    pub gae_checkpoint: Option<Checkpoint>,
    pub diffusion_checkpoint: Checkpoint,
}

pub fn perceptual_extractor(cfg: &PipelineConfig) -> Result<Box<dyn FeatureExtractor>> {
    build_extractor(cfg.loss.perceptual, cfg.loss.vgg19_weights.as_deref())
}

/// Stage 1 for latent variants.
pub fn train_stage1(cfg: &PipelineConfig, variant: Variant, patches: &[ImagePair]) -> Result<GaeTrainer> {
    let bands = patches.first().ok_or_else(|| Error::Config("no training patches".into()))?.hr.bands();
    let (grouping, gae_cfg) = variant.adjust(cfg, bands);
    let gae = Gae::new(gae_cfg, grouping, bands, cfg.seed)?;
    let phi = perceptual_extractor(cfg)?;
    let hr: Vec<HsiCube> = patches.iter().map(|p| p.hr.clone()).collect();
    let mut trainer = GaeTrainer::new(gae, cfg.stage1.clone(), cfg.loss.weights())?;
    trainer.run(&hr, phi.as_ref())?;
    Ok(trainer)
}

/// Outcome of stage 2.
pub struct Stage2 {
    pub system: SrSystem,
    pub checkpoint: Checkpoint,
    pub history: Vec<f64>,
    pub pair_count: usize,
}

/// Stage 2 given a trained (and from here on frozen) autoencoder.
pub fn train_stage2(cfg: &PipelineConfig, variant: Variant, gae: Option<Gae>, patches: &[ImagePair]) -> Result<Stage2> {
    let pairs = diffusion_pairs(variant, gae.as_ref(), patches)?;
    let targets: Vec<Tensor> = pairs.iter().map(|p| p.target.clone()).collect();
    let norm = LatentNorm::fit(&targets);
    let normed: Vec<LatentPair> =
        pairs.iter().map(|p| LatentPair { cond: norm.apply(&p.cond), target: norm.apply(&p.target) }).collect();
    let channels = normed[0].target.c();
    let unet = UNet::new(cfg.diffusion.clone(), channels, cfg.seed)?;
    let mut trainer = DiffusionTrainer::new(unet, cfg.stage2.clone())?;
    trainer.run(&normed)?;
    let ck = trainer.to_checkpoint()?;
    let DiffusionTrainer { model, schedule, history, .. } = trainer;
    model.reset_calls();
    let system = SrSystem { variant, scale: cfg.scale, gae, unet: model, norm, schedule };
    let checkpoint = system.diffusion_checkpoint(Some(ck))?;
    Ok(Stage2 { system, checkpoint, history, pair_count: pairs.len() })
}

/// Both stages for one variant on the given training patches.
pub fn train_system(cfg: &PipelineConfig, variant: Variant, patches: &[ImagePair]) -> Result<TrainedSystem> {
    let mut summary = TrainingSummary::default();
    let (gae, gae_checkpoint) = if variant.uses_gae() {
        let t = train_stage1(cfg, variant, patches)?;
        summary.stage1_steps = t.step;
        summary.stage1_final_loss = Some(mean_tail(&t.history.iter().map(|b| b.total).collect::<Vec<_>>(), 20));
        let ck = t.to_checkpoint()?;
        (Some(t.model), Some(ck))
    } else {
        (None, None)
    };
    let st = train_stage2(cfg, variant, gae, patches)?;
    summary.stage2_steps = st.history.len();
    summary.stage2_final_loss = mean_tail(&st.history, 20);
    summary.pair_count = st.pair_count;
    Ok(TrainedSystem { system: st.system, summary, gae_checkpoint, diffusion_checkpoint: st.checkpoint })
}
