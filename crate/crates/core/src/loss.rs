//! Reconstruction losses for the autoencoder: L1, spectral angle, spatial and
//! spectral gradient, and a windowed perceptual term.
//!
//! The SAM and gradient kernels work in `f64` on flat NCHW buffers and return
//! the value together with the analytic gradient w.r.t. the reconstruction.
//! [`SamLoss`] and [`GradientLoss`] wrap them as graph operations.

use std::path::Path;

use hsisr_nn::{Checkpoint, CustomOp, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::HsiCube;

pub const SAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// SAM weight.
    pub lambda1: f64,
    /// Gradient weight.
    pub lambda2: f64,
    /// Perceptual weight.
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 0.3, lambda2: 0.1, lambda3: 0.001 }
    }
}

impl LossConfig {
    pub fn l1_only() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub sam: f64,
    pub gradient: f64,
    pub perceptual: f64,
    pub total: f64,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Mean over all `N·H·W` pixels of the spectral angle divided by π.
///
/// Spectra are normalized with norms floored at [`SAM_EPS`] and the angle is
/// taken as `2·atan2(‖u − v‖, ‖u + v‖)`, which equals the arccos form for
/// nonzero spectra and is exactly zero for identical ones.
pub fn sam_kernel(re: &[f64], hr: &[f64], shape: [usize; 4]) -> (f64, Vec<f64>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let pixels = n * hw;
    let mut grad = vec![0.0; re.len()];
    let mut total = 0.0;
    let mut u = vec![0.0; c];
    let mut v = vec![0.0; c];
    for b in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + p;
            let nr = (0..c).map(|k| re[idx(k)].powi(2)).sum::<f64>().sqrt();
            let nh = (0..c).map(|k| hr[idx(k)].powi(2)).sum::<f64>().sqrt();
            let (dr, dh) = (nr.max(SAM_EPS), nh.max(SAM_EPS));
            for k in 0..c {
                u[k] = re[idx(k)] / dr;
                v[k] = hr[idx(k)] / dh;
            }
            let diff = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let sum = u.iter().zip(&v).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
            total += 2.0 * diff.atan2(sum);
            if nr < SAM_EPS || nh < SAM_EPS {
                continue;
            }
            // dθ/dre = -(v - ⟨u,v⟩u) / (‖v - ⟨u,v⟩u‖ · ‖re‖)
            let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let ortho: Vec<f64> = (0..c).map(|k| v[k] - cos * u[k]).collect();
            let on = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
            if on < 1e-12 {
                continue;
            }
            for k in 0..c {
                grad[idx(k)] = -ortho[k] / (on * nr);
            }
        }
    }
    let norm = pixels as f64 * std::f64::consts::PI;
    grad.iter_mut().for_each(|g| *g /= norm);
    (total / norm, grad)
}

/// Forward differences of `x` along H, W and C, in that order.
pub fn difference_fields(x: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let at = |b: usize, k: usize, y: usize, i: usize| x[((b * c + k) * h + y) * w + i];
    let mut out = Vec::new();
    for b in 0..n {
        for k in 0..c {
            for y in 0..h.saturating_sub(1) {
                for i in 0..w {
                    out.push(at(b, k, y + 1, i) - at(b, k, y, i));
                }
            }
        }
    }
    for b in 0..n {
        for k in 0..c {
            for y in 0..h {
                for i in 0..w.saturating_sub(1) {
                    out.push(at(b, k, y, i + 1) - at(b, k, y, i));
                }
            }
        }
    }
    for b in 0..n {
        for k in 0..c.saturating_sub(1) {
            for y in 0..h {
                for i in 0..w {
                    out.push(at(b, k + 1, y, i) - at(b, k, y, i));
                }
            }
        }
    }
    out
}

/// Mean absolute difference between the stacked difference fields of `re`
/// and `hr`.
pub fn gradient_kernel(re: &[f64], hr: &[f64], shape: [usize; 4]) -> (f64, Vec<f64>) {
    let [n, c, h, w] = shape;
    let d: Vec<f64> = re.iter().zip(hr).map(|(a, b)| a - b).collect();
    let at = |b: usize, k: usize, y: usize, i: usize| ((b * c + k) * h + y) * w + i;
    let count = n * c * (h.saturating_sub(1) * w + h * w.saturating_sub(1)) + n * c.saturating_sub(1) * h * w;
    let mut grad = vec![0.0; re.len()];
    let mut total = 0.0;
    let mut visit = |hi: usize, lo: usize, grad: &mut [f64]| {
        let diff = d[hi] - d[lo];
        total += diff.abs();
        let s = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[hi] += s;
        grad[lo] -= s;
    };
    for b in 0..n {
        for k in 0..c {
            for y in 0..h {
                for i in 0..w {
                    if y + 1 < h {
                        visit(at(b, k, y + 1, i), at(b, k, y, i), &mut grad);
                    }
                    if i + 1 < w {
                        visit(at(b, k, y, i + 1), at(b, k, y, i), &mut grad);
                    }
                    if k + 1 < c {
                        visit(at(b, k + 1, y, i), at(b, k, y, i), &mut grad);
                    }
                }
            }
        }
    }
    if count == 0 {
        return (0.0, grad);
    }
    grad.iter_mut().for_each(|g| *g /= count as f64);
    (total / count as f64, grad)
}

fn scalar_backward(kernel: fn(&[f64], &[f64], [usize; 4]) -> (f64, Vec<f64>), inputs: &[&Tensor], g: &Tensor) -> Vec<Option<Tensor>> {
    let (re, hr) = (inputs[0], inputs[1]);
    let (_, grad) = kernel(&to_f64(re), &to_f64(hr), re.shape());
    let scale = g.data()[0] as f64;
    vec![Some(Tensor::from_vec(re.shape(), grad.into_iter().map(|v| (v * scale) as f32).collect())), None]
}

/// Graph operation for [`sam_kernel`]; inputs `[re, hr]`, gradient flows to `re` only.
pub struct SamLoss;

impl CustomOp for SamLoss {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (v, _) = sam_kernel(&to_f64(inputs[0]), &to_f64(inputs[1]), inputs[0].shape());
        Tensor::full([1, 1, 1, 1], v as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        scalar_backward(sam_kernel, inputs, g)
    }
}

/// Graph operation for [`gradient_kernel`]; inputs `[re, hr]`.
pub struct GradientLoss;

impl CustomOp for GradientLoss {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (v, _) = gradient_kernel(&to_f64(inputs[0]), &to_f64(inputs[1]), inputs[0].shape());
        Tensor::full([1, 1, 1, 1], v as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        scalar_backward(gradient_kernel, inputs, g)
    }
}

/// A frozen feature map from 3-channel images to feature tensors.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// `x` is `[N, 3, H, W]`. Weights enter the graph as constants.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// `φ(x) = x`.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, _: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Chain of 3×3 convolutions, each followed by ReLU.
pub struct ConvExtractor {
    name: String,
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvExtractor {
    pub const RANDOM_SEED: u64 = 0x5eed_f00d;
    pub const RANDOM_WIDTH: usize = 16;

    /// Two ReLU convolutions `3 → 16 → 16` with weights drawn from a fixed seed.
    pub fn fixed_random() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::RANDOM_SEED);
        let mut layers = Vec::new();
        for cin in [3, Self::RANDOM_WIDTH] {
            let std = (2.0 / (cin * 9) as f32).sqrt();
            let mut w = Tensor::randn([Self::RANDOM_WIDTH, cin, 3, 3], &mut rng);
            w.scale_assign(std);
            layers.push((w, Tensor::zeros([Self::RANDOM_WIDTH, 1, 1, 1])));
        }
        Self { name: "fixed-random-conv".into(), layers }
    }

    /// The first two convolutions of VGG19 (`features.0`, `features.2`)
    /// from a safetensors file. ImageNet input normalization is folded into
    /// the first layer.
    pub fn vgg19(path: impl AsRef<Path>) -> Result<Self> {
        const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
        const STD: [f32; 3] = [0.229, 0.224, 0.225];
        let ckpt = Checkpoint::load(path)?;
        let fetch = |name: &str| {
            ckpt.get(name).cloned().ok_or_else(|| Error::Config(format!("VGG19 weights lack tensor `{name}`")))
        };
        let mut layers = Vec::new();
        for (i, layer) in ["features.0", "features.2"].iter().enumerate() {
            let w = fetch(&format!("{layer}.weight"))?;
            let b = fetch(&format!("{layer}.bias"))?;
            let [cout, cin, kh, kw] = w.shape();
            if kh != 3 || kw != 3 || b.len() != cout || (i == 0 && cin != 3) {
                return Err(Error::Config(format!("unexpected VGG19 shapes for {layer}: {:?}", w.shape())));
            }
            let mut b = b.reshape([cout, 1, 1, 1]);
            let mut w = w;
            if i == 0 {
                for o in 0..cout {
                    let mut shift = 0.0;
                    for ci in 0..3 {
                        for k in 0..9 {
                            let idx = (o * 3 + ci) * 9 + k;
                            shift += w.data()[idx] * MEAN[ci] / STD[ci];
                            w.data_mut()[idx] /= STD[ci];
                        }
                    }
                    b.data_mut()[o] -= shift;
                }
            }
            layers.push((w, b));
        }
        Ok(Self { name: "pretrained-vgg19".into(), layers })
    }
}

impl FeatureExtractor for ConvExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.layers {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            h = g.conv2d(h, wv, Some(bv), 1, 1)?;
            h = g.act(h, hsisr_nn::Activation::Relu);
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualBackend {
    #[default]
    FixedRandomConv,
    PretrainedVgg19,
    Identity,
}

impl std::str::FromStr for PerceptualBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-random-conv" => Ok(Self::FixedRandomConv),
            "pretrained-vgg19" => Ok(Self::PretrainedVgg19),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown perceptual backend `{other}`"))),
        }
    }
}

pub fn build_extractor(backend: PerceptualBackend, weights: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match backend {
        PerceptualBackend::FixedRandomConv => Box::new(ConvExtractor::fixed_random()),
        PerceptualBackend::Identity => Box::new(IdentityExtractor),
        PerceptualBackend::PretrainedVgg19 => {
            let path = weights.ok_or_else(|| Error::Config("pretrained-vgg19 needs `loss.vgg19_weights`".into()))?;
            Box::new(ConvExtractor::vgg19(path)?)
        }
    })
}

/// Start bands of the consecutive 3-band windows; the last one is moved
/// left so it ends at band `c`.
pub fn perceptual_windows(c: usize) -> Result<Vec<usize>> {
    if c < 3 {
        return Err(Error::Shape(format!("perceptual loss needs at least 3 bands, got {c}")));
    }
    Ok((0..c.div_ceil(3)).map(|k| (3 * k).min(c - 3)).collect())
}

fn check_pair(re: &Tensor, hr: &Tensor) -> Result<()> {
    if re.shape() != hr.shape() {
        return Err(Error::Shape(format!("loss inputs {:?} vs {:?}", re.shape(), hr.shape())));
    }
    Ok(())
}

/// Graph nodes of the composite loss on NCHW tensors `re` (trainable) and
/// `hr` (target).
pub struct LossNodes {
    pub total: Var,
    pub l1: Var,
    pub sam: Var,
    pub gradient: Var,
    pub perceptual: Option<Var>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0] as f64;
        LossBreakdown {
            l1: v(self.l1),
            sam: v(self.sam),
            gradient: v(self.gradient),
            perceptual: self.perceptual.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

pub fn graph_perceptual(g: &mut Graph, re: Var, hr: Var, phi: &dyn FeatureExtractor) -> Result<Var> {
    let c = g.value(re).c();
    let windows = perceptual_windows(c)?;
    let weight = 1.0 / windows.len() as f32;
    let mut terms = Vec::new();
    for s in windows {
        let (a, b) = (g.slice_channels(re, s, s + 3)?, g.slice_channels(hr, s, s + 3)?);
        let (fa, fb) = (phi.features(g, a)?, phi.features(g, b)?);
        terms.push((g.mean_abs(fa, fb)?, weight));
    }
    Ok(g.weighted_sum(&terms)?)
}

/// `L1 + λ1·SAM + λ2·grad + λ3·perceptual`. The perceptual branch is skipped
/// when `λ3 == 0`.
pub fn graph_loss(g: &mut Graph, re: Var, hr: Var, cfg: &LossConfig, phi: &dyn FeatureExtractor) -> Result<LossNodes> {
    check_pair(g.value(re), g.value(hr))?;
    let l1 = g.mean_abs(re, hr)?;
    let sam = g.custom(&[re, hr], Box::new(SamLoss));
    let gradient = g.custom(&[re, hr], Box::new(GradientLoss));
    let perceptual = if cfg.lambda3 > 0.0 { Some(graph_perceptual(g, re, hr, phi)?) } else { None };
    let mut terms = vec![(l1, 1.0), (sam, cfg.lambda1 as f32), (gradient, cfg.lambda2 as f32)];
    if let Some(p) = perceptual {
        terms.push((p, cfg.lambda3 as f32));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(LossNodes { total, l1, sam, gradient, perceptual })
}

fn pair_tensors(re: &HsiCube, hr: &HsiCube) -> Result<(Tensor, Tensor)> {
    re.same_shape(hr)?;
    Ok((re.to_tensor(), hr.to_tensor()))
}

pub fn loss_l1(re: &HsiCube, hr: &HsiCube) -> Result<f64> {
    re.same_shape(hr)?;
    let n = re.data().len() as f64;
    Ok(re.data().iter().zip(hr.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n)
}

pub fn loss_sam(re: &HsiCube, hr: &HsiCube) -> Result<f64> {
    let (a, b) = pair_tensors(re, hr)?;
    Ok(sam_kernel(&to_f64(&a), &to_f64(&b), a.shape()).0)
}

pub fn loss_gradient(re: &HsiCube, hr: &HsiCube) -> Result<f64> {
    let (a, b) = pair_tensors(re, hr)?;
    Ok(gradient_kernel(&to_f64(&a), &to_f64(&b), a.shape()).0)
}

pub fn loss_perceptual(re: &HsiCube, hr: &HsiCube, phi: &dyn FeatureExtractor) -> Result<f64> {
    let (a, b) = pair_tensors(re, hr)?;
    let mut g = Graph::inference();
    let (a, b) = (g.constant(a), g.constant(b));
    let v = graph_perceptual(&mut g, a, b, phi)?;
    Ok(g.value(v).data()[0] as f64)
}

pub fn loss_total(re: &HsiCube, hr: &HsiCube, cfg: &LossConfig, phi: &dyn FeatureExtractor) -> Result<LossBreakdown> {
    cfg.validate()?;
    let l1 = loss_l1(re, hr)?;
    let sam = loss_sam(re, hr)?;
    let gradient = loss_gradient(re, hr)?;
    let perceptual = if cfg.lambda3 > 0.0 { loss_perceptual(re, hr, phi)? } else { 0.0 };
    let total = l1 + cfg.lambda1 * sam + cfg.lambda2 * gradient + cfg.lambda3 * perceptual;
    Ok(LossBreakdown { l1, sam, gradient, perceptual, total })
}
