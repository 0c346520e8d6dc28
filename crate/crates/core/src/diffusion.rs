//! Conditional DDPM over latents: noise schedules, forward corruption, an
//! ε-predicting U-Net conditioned by channel concatenation, and the ancestral
//! sampler.

use std::sync::atomic::{AtomicUsize, Ordering};

use hsisr_nn::{Activation, Adam, Checkpoint, Conv2d, CustomOp, Graph, Linear, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{seeded, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// What the U-Net's last layer represents. Either way the denoiser returns ε.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserHead {
    /// The network output is ε directly.
    Eps,
    /// The network outputs a correction δ to the conditioning latent;
    /// ε is then `(z_t − √ᾱ_t·(cond + δ)) / √(1 − ᾱ_t)`.
    #[default]
    ResidualX0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub schedule: ScheduleKind,
    /// First and last β of the linear schedule. Unset values default to
    /// `1e-4` and `0.02` scaled by `1000 / T`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub time_dim: usize,
    pub widths: Vec<usize>,
    pub head: DenoiserHead,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { t: 100, schedule: ScheduleKind::Linear, beta_min: None, beta_max: None, time_dim: 32, widths: vec![32, 64], head: DenoiserHead::default() }
    }
}

impl DiffusionConfig {
    pub fn beta_range(&self) -> (f64, f64) {
        let scale = 1000.0 / self.t.max(1) as f64;
        (self.beta_min.unwrap_or(1e-4 * scale), self.beta_max.unwrap_or((0.02 * scale).min(0.999)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("diffusion.widths must be non-empty and positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("diffusion.time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        build_schedule(self).map(|_| ())
    }
}

/// β, α and ᾱ for timesteps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs T >= 1".into()));
        }
        if !(betas[0] > 0.0) || !(betas[betas.len() - 1] < 1.0) || betas.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < β_1 <= ... <= β_T < 1 (got {} .. {})",
                betas[0],
                betas[betas.len() - 1]
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn linear(t: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("noise schedule needs T >= 1".into()));
        }
        let betas =
            (0..t).map(|i| if t == 1 { beta_1 } else { beta_1 + (beta_t - beta_1) * i as f64 / (t - 1) as f64 }).collect();
        Self::from_betas(betas)
    }

    /// Squared-cosine ᾱ with offset 0.008; β capped at 0.999.
    pub fn cosine(t: usize) -> Result<Self> {
        let f = |s: f64| (((s / t as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (1..=t).map(|s| (1.0 - f(s as f64) / f(s as f64 - 1.0)).min(0.999)).collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

pub fn build_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    match cfg.schedule {
        ScheduleKind::Linear => {
            let (lo, hi) = cfg.beta_range();
            NoiseSchedule::linear(cfg.t, lo, hi)
        }
        ScheduleKind::Cosine => NoiseSchedule::cosine(cfg.t),
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("q_sample z0 {:?} vs ε {:?}", z0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| (a * z as f64 + b * e as f64) as f32))
}

/// A noise predictor `ε_θ(z_t, t, z_LR)`.
pub trait Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;

    /// Number of single-latent evaluations so far.
    fn calls(&self) -> usize;
}

/// `z_{t−1} = (z_t − (1−α_t)/√(1−ᾱ_t)·ε_θ) / √α_t + √(1−α_t)·ε`; the noise
/// draw is ignored at `t = 1`.
pub fn reverse_step(
    model: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    cond: &Tensor,
    sched: &NoiseSchedule,
    eps_draw: &Tensor,
) -> Result<Tensor> {
    let (alpha, ab) = (sched.alpha(t)?, sched.alpha_bar(t)?);
    let pred = model.predict(z_t, t, cond)?;
    if pred.shape() != z_t.shape() || eps_draw.shape() != z_t.shape() {
        return Err(Error::Shape(format!("reverse_step shapes {:?}/{:?}/{:?}", z_t.shape(), pred.shape(), eps_draw.shape())));
    }
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if t > 1 { (1.0 - alpha).sqrt() } else { 0.0 };
    let mut out = Tensor::zeros(z_t.shape());
    for (((o, &z), &p), &e) in out.data_mut().iter_mut().zip(z_t.data()).zip(pred.data()).zip(eps_draw.data()) {
        *o = (inv * (z as f64 - coef * p as f64) + sigma * e as f64) as f32;
    }
    Ok(out)
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`; exactly `T`
/// denoiser evaluations.
pub fn reverse_sample(model: &dyn Denoiser, cond: &Tensor, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = cond.shape();
    let mut z = Tensor::randn(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let eps = if t > 1 { Tensor::randn(shape, rng) } else { Tensor::zeros(shape) };
        z = reverse_step(model, &z, t, cond, sched, &eps)?;
    }
    Ok(z)
}

/// Closure-backed denoiser, mostly for oracles in tests.
pub struct FnDenoiser<F> {
    f: F,
    calls: AtomicUsize,
}

impl<F: Fn(&Tensor, usize, &Tensor) -> Tensor> FnDenoiser<F> {
    pub fn new(f: F) -> Self {
        Self { f, calls: AtomicUsize::new(0) }
    }
}

impl<F: Fn(&Tensor, usize, &Tensor) -> Tensor> Denoiser for FnDenoiser<F> {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(z_t.n(), Ordering::Relaxed);
        Ok((self.f)(z_t, t, cond))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim, 1, 1]`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros([ts.len(), dim, 1, 1]);
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.data_mut()[n * dim + i] = arg.sin() as f32;
            out.data_mut()[n * dim + half + i] = arg.cos() as f32;
        }
    }
    out
}

struct ResBlock {
    conv1: Conv2d,
    temb: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, temb_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, cout, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let act = Activation::Silu;
        let h = g.act(x, act);
        let h = self.conv1.forward(g, store, h)?;
        let te = g.act(temb, act);
        let te = self.temb.forward(g, store, te)?;
        let h = g.add_channel(h, te)?;
        let h = g.act(h, act);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        Ok(g.add(h, skip))
    }
}

/// Per batch item `n`: `a[n]·z_t − b[n]·x0`.
struct EpsFromX0 {
    a: Vec<f32>,
    b: Vec<f32>,
}

impl EpsFromX0 {
    fn combine(&self, x: &Tensor, y: &Tensor, ka: f32, kb: f32) -> Tensor {
        let per = x.len() / self.a.len();
        let mut out = x.clone();
        for (i, (o, &v)) in out.data_mut().iter_mut().zip(y.data()).enumerate() {
            let n = i / per;
            *o = ka * self.a[n] * *o + kb * self.b[n] * v;
        }
        out
    }
}

impl CustomOp for EpsFromX0 {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        self.combine(inputs[0], inputs[1], 1.0, -1.0)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let zero = Tensor::zeros(g.shape());
        vec![Some(self.combine(g, &zero, 1.0, 0.0)), Some(self.combine(&zero, g, 0.0, -1.0))]
    }
}

/// U-Net noise predictor. The input is `concat(z_t, z_LR)`; one resolution
/// level per entry of `widths`, with skip connections between matching levels.
pub struct UNet {
    pub config: DiffusionConfig,
    pub channels: usize,
    pub store: ParamStore,
    temb1: Linear,
    temb2: Linear,
    input: Conv2d,
    down: Vec<(ResBlock, Option<Conv2d>)>,
    mid: ResBlock,
    up: Vec<(Option<Conv2d>, ResBlock)>,
    output: Conv2d,
    schedule: NoiseSchedule,
    calls: AtomicUsize,
}

impl UNet {
    pub fn new(config: DiffusionConfig, channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, "unet-init");
        let mut store = ParamStore::new();
        let td = 2 * config.time_dim;
        let temb1 = Linear::new(&mut store, "temb.0", config.time_dim, td, &mut rng);
        let temb2 = Linear::new(&mut store, "temb.1", td, td, &mut rng);
        let w = &config.widths;
        let input = Conv2d::new(&mut store, "in", 2 * channels, w[0], 3, 1, &mut rng);
        let mut down = Vec::new();
        let mut cin = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let block = ResBlock::new(&mut store, &format!("down.{i}"), cin, wi, td, &mut rng);
            let pool = (i + 1 < w.len()).then(|| Conv2d::new(&mut store, &format!("down.{i}.pool"), wi, wi, 3, 2, &mut rng));
            down.push((block, pool));
            cin = wi;
        }
        let mid = ResBlock::new(&mut store, "mid", cin, cin, td, &mut rng);
        let mut up = Vec::new();
        for (i, &wi) in w.iter().enumerate().rev() {
            let lift = (i + 1 < w.len()).then(|| Conv2d::new(&mut store, &format!("up.{i}.lift"), cin, wi, 3, 1, &mut rng));
            let block = ResBlock::new(&mut store, &format!("up.{i}"), 2 * wi, wi, td, &mut rng);
            up.push((lift, block));
            cin = wi;
        }
        let output = Conv2d::new_zeroed(&mut store, "out", w[0], channels, 3);
        let schedule = build_schedule(&config)?;
        Ok(Self { config, channels, store, temb1, temb2, input, down, mid, up, output, schedule, calls: AtomicUsize::new(0) })
    }

    /// Required divisor of the latent height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.config.widths.len() - 1)
    }

    pub fn forward_graph(&self, g: &mut Graph, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let [n, c, h, w] = g.value(z_t).shape();
        let m = self.spatial_multiple();
        if c != self.channels || g.value(cond).shape() != [n, c, h, w] || ts.len() != n {
            return Err(Error::Shape(format!(
                "denoiser for {} channels got z_t {:?}, cond {:?}, {} timesteps",
                self.channels,
                [n, c, h, w],
                g.value(cond).shape(),
                ts.len()
            )));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::Indivisible { height: h, width: w, factor: m });
        }
        let store = &self.store;
        let te = g.constant(time_embedding(ts, self.config.time_dim));
        let te = self.temb1.forward(g, store, te)?;
        let te = g.act(te, Activation::Silu);
        let te = self.temb2.forward(g, store, te)?;

        let x = g.concat(z_t, cond)?;
        let mut x = self.input.forward(g, store, x)?;
        let mut skips = Vec::new();
        for (block, pool) in &self.down {
            x = block.forward(g, store, x, te)?;
            skips.push(x);
            if let Some(p) = pool {
                x = p.forward(g, store, x)?;
            }
        }
        x = self.mid.forward(g, store, x, te)?;
        for (lift, block) in &self.up {
            if let Some(l) = lift {
                x = g.upsample2(x);
                x = l.forward(g, store, x)?;
            }
            let skip = skips.pop().expect("one skip per level");
            x = g.concat(x, skip)?;
            x = block.forward(g, store, x, te)?;
        }
        let x = g.act(x, Activation::Silu);
        let out = self.output.forward(g, store, x)?;
        match self.config.head {
            DenoiserHead::Eps => Ok(out),
            DenoiserHead::ResidualX0 => {
                let x0 = g.add(cond, out);
                let mut a = Vec::with_capacity(n);
                let mut b = Vec::with_capacity(n);
                for &t in ts {
                    let ab = self.schedule.alpha_bar(t)?;
                    let s = (1.0 - ab).sqrt();
                    a.push((1.0 / s) as f32);
                    b.push((ab.sqrt() / s) as f32);
                }
                Ok(g.custom(&[z_t, x0], Box::new(EpsFromX0 { a, b })))
            }
        }
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_store("unet.", &self.store);
        ck.set_meta("kind", "diffusion");
        ck.set_meta("diffusion_config", serde_json::to_string(&self.config)?);
        ck.set_meta("channels", self.channels);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks `{k}`")));
        let config: DiffusionConfig = serde_json::from_str(meta("diffusion_config")?)?;
        let channels = meta("channels")?.parse().map_err(|_| Error::CheckpointMismatch("bad `channels`".into()))?;
        let mut model = Self::new(config, channels, 0)?;
        ck.load_store("unet.", &mut model.store).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(model)
    }
}

impl Denoiser for UNet {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(z_t.n(), Ordering::Relaxed);
        let mut g = Graph::inference();
        let (z, c) = (g.constant(z_t.clone()), g.constant(cond.clone()));
        let out = self.forward_graph(&mut g, z, &vec![t; z_t.n()], c)?;
        Ok(g.into_value(out))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Affine map `(z − shift)·scale` applied to latents before diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub shift: f32,
    pub scale: f32,
}

impl Default for LatentNorm {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

impl LatentNorm {
    /// Zero mean, unit standard deviation over all values of `samples`.
    pub fn fit(samples: &[Tensor]) -> Self {
        let n: usize = samples.iter().map(Tensor::len).sum();
        if n == 0 {
            return Self::default();
        }
        let mean = samples.iter().map(Tensor::sum).sum::<f64>() / n as f64;
        let var = samples.iter().flat_map(|t| t.data()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        Self { shift: mean as f32, scale: if std > 1e-12 { (1.0 / std) as f32 } else { 1.0 } }
    }

    pub fn apply(&self, z: &Tensor) -> Tensor {
        z.map(|v| (v - self.shift) * self.scale)
    }

    pub fn invert(&self, z: &Tensor) -> Tensor {
        z.map(|v| v / self.scale + self.shift)
    }
}

/// Conditioning and target tensor of one training example, both `[1, C, h, w]`.
#[derive(Clone, Debug)]
pub struct LatentPair {
    pub cond: Tensor,
    pub target: Tensor,
}

/// Stage-2 loop: L1 between the drawn noise and its prediction at a uniform
/// random timestep per batch item.
pub struct DiffusionTrainer {
    pub model: UNet,
    pub schedule: NoiseSchedule,
    pub adam: Adam,
    pub train: TrainConfig,
    pub step: usize,
    pub history: Vec<f64>,
}

impl DiffusionTrainer {
    pub fn new(model: UNet, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let schedule = build_schedule(&model.config)?;
        let adam = Adam::new(train.adam(), &model.store);
        Ok(Self { model, schedule, adam, train, step: 0, history: Vec::new() })
    }

    pub fn step(&mut self, pairs: &[LatentPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Config("no latent pairs to train on".into()));
        }
        let mut rng = self.train.step_rng(self.step);
        let mut conds = Vec::new();
        let mut noisy = Vec::new();
        let mut noises = Vec::new();
        let mut ts = Vec::new();
        for _ in 0..self.train.batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let t = rng.random_range(1..=self.schedule.steps());
            let eps = Tensor::randn(p.target.shape(), &mut rng);
            noisy.push(q_sample(&p.target, t, &eps, &self.schedule)?);
            conds.push(p.cond.clone());
            noises.push(eps);
            ts.push(t);
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::stack(&noisy));
        let c = g.constant(Tensor::stack(&conds));
        let e = g.constant(Tensor::stack(&noises));
        let pred = self.model.forward_graph(&mut g, z, &ts, c)?;
        let loss = g.mean_abs(pred, e)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numerical { step: self.step, what: format!("stage-2 loss is {value}") });
        }
        let grads = g.backward(loss).param_grads(&g, &self.model.store);
        let lr = self.train.lr_at(self.step);
        self.adam.step_with_lr(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        self.history.push(value);
        if self.train.log_every > 0 && self.step % self.train.log_every == 0 {
            log::info!("stage2 step {:>6} ε-loss {:.6}", self.step, value);
        }
        Ok(value)
    }

    pub fn run(&mut self, pairs: &[LatentPair]) -> Result<()> {
        while self.step < self.train.steps {
            self.step(pairs)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        for (name, t) in self.adam.state(&self.model.store) {
            ck.insert(name, t);
        }
        ck.set_meta("step", self.step);
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny() -> DiffusionConfig {
        DiffusionConfig { t: 10, widths: vec![8, 16], time_dim: 8, ..Default::default() }
    }

    #[test]
    fn documented_linear_schedule() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(NoiseSchedule::linear(4, 0.0, 0.4).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.1).is_err());
    }

    #[test]
    fn default_schedules_end_near_zero() {
        let lin = build_schedule(&DiffusionConfig::default()).unwrap();
        assert_eq!(lin.steps(), 100);
        assert!((lin.beta(1).unwrap() - 1e-3).abs() < 1e-15 && (lin.beta(100).unwrap() - 0.2).abs() < 1e-12);
        assert!(lin.alpha_bar(100).unwrap() < 0.05);
        let cos = build_schedule(&DiffusionConfig { schedule: ScheduleKind::Cosine, ..Default::default() }).unwrap();
        assert!(cos.alpha_bar(100).unwrap() < 0.05);
        assert!(lin.alpha_bar(0).is_err() && lin.alpha_bar(101).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Tensor::randn([1, 2, 4, 4], &mut rng);
        let s = NoiseSchedule::linear(10, 1e-7, 0.1).unwrap();
        let zero = Tensor::zeros(z0.shape());
        let z = q_sample(&z0, 3, &zero, &s).unwrap();
        let k = s.alpha_bar(3).unwrap().sqrt() as f32;
        assert!(z.max_abs_diff(&z0.map(|v| v * k)) < 1e-6);
        let eps = Tensor::randn(z0.shape(), &mut rng);
        assert!(q_sample(&z0, 1, &eps, &s).unwrap().max_abs_diff(&z0) < 1e-3);
        assert!(q_sample(&z0, 11, &eps, &s).is_err());
    }

    #[test]
    fn reverse_step_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = NoiseSchedule::linear(5, 0.05, 0.3).unwrap();
        let z = Tensor::randn([1, 2, 4, 4], &mut rng);
        let zero_model = FnDenoiser::new(|z: &Tensor, _, _: &Tensor| Tensor::zeros(z.shape()));
        let out = reverse_step(&zero_model, &z, 3, &z, &s, &Tensor::zeros(z.shape())).unwrap();
        let k = 1.0 / s.alpha(3).unwrap().sqrt() as f32;
        assert!(out.max_abs_diff(&z.map(|v| v * k)) < 1e-6);
        let noise = Tensor::full(z.shape(), 5.0);
        let t1 = reverse_step(&zero_model, &z, 1, &z, &s, &noise).unwrap();
        let k1 = 1.0 / s.alpha(1).unwrap().sqrt() as f32;
        assert!(t1.max_abs_diff(&z.map(|v| v * k1)) < 1e-6);
        assert!(reverse_step(&zero_model, &z, 0, &z, &s, &noise).is_err());
    }

    #[test]
    fn exact_noise_oracle_recovers_z0_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let z0 = Tensor::randn([1, 3, 4, 4], &mut rng);
        let eps = Tensor::randn(z0.shape(), &mut rng);
        let zt = q_sample(&z0, 1, &eps, &s).unwrap();
        let e2 = eps.clone();
        let oracle = FnDenoiser::new(move |_: &Tensor, _, _: &Tensor| e2.clone());
        let back = reverse_step(&oracle, &zt, 1, &z0, &s, &Tensor::zeros(z0.shape())).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn sampler_call_count_and_determinism() {
        let net = UNet::new(tiny(), 2, 0).unwrap();
        let s = build_schedule(&net.config).unwrap();
        let cond = Tensor::full([1, 2, 4, 4], 0.3);
        let a = reverse_sample(&net, &cond, &s, &mut seeded(7, "sample")).unwrap();
        assert_eq!(net.calls(), 10);
        let b = reverse_sample(&net, &cond, &s, &mut seeded(7, "sample")).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.calls(), 20);
    }

    #[test]
    fn unet_shapes_and_output_at_init() {
        let cfg = DiffusionConfig { widths: vec![8, 8, 8], time_dim: 8, head: DenoiserHead::Eps, ..Default::default() };
        let net = UNet::new(cfg.clone(), 3, 0).unwrap();
        let z = Tensor::full([2, 3, 8, 8], 0.5);
        let out = net.predict(&z, 5, &z).unwrap();
        assert_eq!(out.shape(), [2, 3, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(net.predict(&Tensor::zeros([1, 3, 6, 6]), 1, &Tensor::zeros([1, 3, 6, 6])).is_err());

        // the residual head starts out predicting x0 = cond
        let net = UNet::new(DiffusionConfig { head: DenoiserHead::ResidualX0, ..cfg }, 3, 0).unwrap();
        let s = build_schedule(&net.config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cond = Tensor::randn([1, 3, 8, 8], &mut rng);
        let eps = Tensor::randn([1, 3, 8, 8], &mut rng);
        for t in [1, 40, 100] {
            let zt = q_sample(&cond, t, &eps, &s).unwrap();
            assert!(net.predict(&zt, t, &cond).unwrap().max_abs_diff(&eps) < 2e-3, "t={t}");
        }
    }

    #[test]
    fn residual_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = EpsFromX0 { a: vec![2.0, 0.5], b: vec![1.5, -3.0] };
        let z = Tensor::randn([2, 1, 2, 2], &mut rng);
        let x0 = Tensor::randn([2, 1, 2, 2], &mut rng);
        let g = Tensor::randn([2, 1, 2, 2], &mut rng);
        let out = op.forward(&[&z, &x0]);
        let grads = op.backward(&[&z, &x0], &out, &g);
        for i in 0..z.len() {
            let n = i / 4;
            assert!((out.data()[i] - (op.a[n] * z.data()[i] - op.b[n] * x0.data()[i])).abs() < 1e-6);
            assert!((grads[0].as_ref().unwrap().data()[i] - op.a[n] * g.data()[i]).abs() < 1e-6);
            assert!((grads[1].as_ref().unwrap().data()[i] + op.b[n] * g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn overfit_and_conditioning_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = LatentPair { cond: Tensor::randn([1, 2, 8, 8], &mut rng), target: Tensor::randn([1, 2, 8, 8], &mut rng) };
        let train = TrainConfig { steps: 200, batch_size: 4, lr: 2e-3, log_every: 0, ..Default::default() };
        let mut tr = DiffusionTrainer::new(UNet::new(tiny(), 2, 1).unwrap(), train).unwrap();
        tr.run(std::slice::from_ref(&pair)).unwrap();
        let head: f64 = tr.history[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = tr.history[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        let z = Tensor::randn([1, 2, 8, 8], &mut rng);
        let with = tr.model.predict(&z, 5, &pair.cond).unwrap();
        let without = tr.model.predict(&z, 5, &Tensor::zeros(pair.cond.shape())).unwrap();
        assert!(with.max_abs_diff(&without) > 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let pair = LatentPair { cond: Tensor::full([1, 2, 4, 4], 0.1), target: Tensor::full([1, 2, 4, 4], 0.2) };
        let train = TrainConfig { steps: 2, batch_size: 1, lr: 0.0, log_every: 0, ..Default::default() };
        let mut tr = DiffusionTrainer::new(UNet::new(tiny(), 2, 1).unwrap(), train).unwrap();
        let before = tr.model.store.clone();
        tr.run(std::slice::from_ref(&pair)).unwrap();
        assert_eq!(tr.model.store, before);
    }

    #[test]
    fn latent_norm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn([1, 2, 4, 4], &mut rng).map(|v| 3.0 * v + 1.0)).collect();
        let norm = LatentNorm::fit(&zs);
        let n = norm.apply(&zs[0]);
        assert!(norm.invert(&n).max_abs_diff(&zs[0]) < 1e-5);
        let all: Vec<Tensor> = zs.iter().map(|z| norm.apply(z)).collect();
        assert!((LatentNorm::fit(&all).shift).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn schedules_are_monotone(t in 1usize..300, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
            let s = NoiseSchedule::linear(t, lo, (lo + span).min(0.99)).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
            let c = NoiseSchedule::cosine(t).unwrap();
            prop_assert!(c.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn q_sample_is_affine(seed in 0u64..200, t in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
            let (z0, eps) = (Tensor::randn([1, 1, 2, 3], &mut rng), Tensor::randn([1, 1, 2, 3], &mut rng));
            let zero = Tensor::zeros(z0.shape());
            let mut sum = q_sample(&z0, t, &zero, &s).unwrap();
            sum.add_assign(&q_sample(&zero, t, &eps, &s).unwrap());
            prop_assert!(sum.max_abs_diff(&q_sample(&z0, t, &eps, &s).unwrap()) < 1e-6);
        }

        #[test]
        fn reverse_step_matches_transcription(seed in 0u64..200, t in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = NoiseSchedule::linear(30, 1e-3, 0.1).unwrap();
            let z = Tensor::randn([1, 1, 3, 3], &mut rng);
            let pred = Tensor::randn(z.shape(), &mut rng);
            let draw = Tensor::randn(z.shape(), &mut rng);
            let p2 = pred.clone();
            let model = FnDenoiser::new(move |_: &Tensor, _, _: &Tensor| p2.clone());
            let got = reverse_step(&model, &z, t, &z, &s, &draw).unwrap();
            let a = 1.0 - s.betas()[t - 1];
            let ab: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
            for i in 0..z.len() {
                let noise = if t > 1 { (1.0 - a).sqrt() * draw.data()[i] as f64 } else { 0.0 };
                let want = (z.data()[i] as f64 - (1.0 - a) / (1.0 - ab).sqrt() * pred.data()[i] as f64) / a.sqrt() + noise;
                prop_assert!((got.data()[i] as f64 - want).abs() <= 1e-7 * want.abs() + 1e-12);
            }
        }
    }
}
