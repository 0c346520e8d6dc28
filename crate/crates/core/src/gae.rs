//! Group-Autoencoder: one encoder shared by every band group, a per-group
//! local decoder, and a global residual decoder over the merged cube.

use hsisr_nn::{Activation, Adam, Checkpoint, Conv2d, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{plan_groups, GroupingConfig};
use crate::hsi::HsiCube;
use crate::loss::{graph_loss, FeatureExtractor, LossBreakdown, LossConfig};
use crate::train::{seeded, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeConfig {
    pub latent_channels: usize,
    /// Spatial reduction of the encoder, a power of two.
    pub latent_downscale: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub global_widths: Vec<usize>,
    pub activation: String,
    /// `false` drops the global decoder (the no-GD variant).
    pub global_decoder: bool,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            latent_downscale: 2,
            enc_widths: vec![32, 64],
            dec_widths: vec![64, 64, 64],
            global_widths: vec![48, 48],
            activation: "silu".into(),
            global_decoder: true,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || !self.latent_downscale.is_power_of_two() {
            return Err(Error::Config(format!(
                "gae needs latent_channels >= 1 and a power-of-two downscale, got {} / {}",
                self.latent_channels, self.latent_downscale
            )));
        }
        if self.enc_widths.is_empty() || self.dec_widths.is_empty() {
            return Err(Error::Config("gae encoder and decoder need at least one layer".into()));
        }
        if self.enc_widths.iter().chain(&self.dec_widths).chain(&self.global_widths).any(|&w| w == 0) {
            return Err(Error::Config("gae layer widths must be >= 1".into()));
        }
        self.act()?;
        Ok(())
    }

    pub fn act(&self) -> Result<Activation> {
        self.activation.parse().map_err(|_| Error::Config(format!("unknown activation `{}`", self.activation)))
    }

    fn levels(&self) -> usize {
        self.latent_downscale.trailing_zeros() as usize
    }
}

/// Latents of one batch, one `[N, L, h, w]` tensor per group.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentList {
    pub latents: Vec<Tensor>,
    pub plan: Vec<(usize, usize)>,
    pub bands: usize,
}

impl LatentList {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Group-major stack `[G·N, L, h, w]`.
    pub fn stacked(&self) -> Tensor {
        Tensor::stack(&self.latents)
    }

    pub fn from_stacked(t: &Tensor, plan: Vec<(usize, usize)>, bands: usize) -> Result<Self> {
        let g = plan.len();
        if g == 0 || t.n() % g != 0 {
            return Err(Error::Shape(format!("{} latents for {g} groups", t.n())));
        }
        let n = t.n() / g;
        let latents = (0..g).map(|k| Tensor::stack(&(0..n).map(|i| t.item(k * n + i)).collect::<Vec<_>>())).collect();
        Ok(Self { latents, plan, bands })
    }
}

struct Layer {
    conv: Conv2d,
    act: bool,
}

fn run(layers: &[Layer], act: Activation, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.conv.forward(g, store, x)?;
        if l.act {
            x = g.act(x, act);
        }
    }
    Ok(x)
}

pub struct Gae {
    pub config: GaeConfig,
    pub grouping: GroupingConfig,
    pub bands: usize,
    pub store: ParamStore,
    plan: Vec<(usize, usize)>,
    act: Activation,
    encoder: Vec<Layer>,
    local: Vec<Layer>,
    global: Vec<Layer>,
}

impl Gae {
    /// Fresh model for `bands`-band cubes; weights drawn from `seed`.
    pub fn new(config: GaeConfig, grouping: GroupingConfig, bands: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = plan_groups(bands, &grouping)?;
        let act = config.act()?;
        let mut rng = seeded(seed, "gae-init");
        let mut store = ParamStore::new();
        let n_subs = grouping.n_subs;
        let r = config.latent_downscale;

        let mut encoder = Vec::new();
        let mut cin = n_subs;
        let mut strided = 0;
        let widths: Vec<usize> = {
            let mut w = config.enc_widths.clone();
            while w.len() < config.levels() + 1 {
                w.push(*w.last().unwrap());
            }
            w
        };
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i > 0 && strided < config.levels() { 2 } else { 1 };
            strided += (stride == 2) as usize;
            encoder.push(Layer { conv: Conv2d::new(&mut store, &format!("enc.{i}"), cin, w, 3, stride, &mut rng), act: true });
            cin = w;
        }
        let last = encoder.len();
        encoder.push(Layer {
            conv: Conv2d::new(&mut store, &format!("enc.{last}"), cin, config.latent_channels, 3, 1, &mut rng),
            act: false,
        });

        let mut local = Vec::new();
        let mut cin = config.latent_channels;
        for (i, &w) in config.dec_widths.iter().enumerate() {
            local.push(Layer { conv: Conv2d::new(&mut store, &format!("dec.{i}"), cin, w, 3, 1, &mut rng), act: true });
            cin = w;
        }
        let last = local.len();
        local.push(Layer {
            conv: Conv2d::new(&mut store, &format!("dec.{last}"), cin, n_subs * r * r, 3, 1, &mut rng),
            act: false,
        });

        let mut global = Vec::new();
        if config.global_decoder {
            let mut cin = bands;
            for (i, &w) in config.global_widths.iter().enumerate() {
                global.push(Layer { conv: Conv2d::new(&mut store, &format!("global.{i}"), cin, w, 3, 1, &mut rng), act: true });
                cin = w;
            }
            let last = global.len();
            global.push(Layer { conv: Conv2d::new_zeroed(&mut store, &format!("global.{last}"), cin, bands, 3), act: false });
        }
        Ok(Self { config, grouping, bands, store, plan, act, encoder, local, global })
    }

    pub fn plan(&self) -> &[(usize, usize)] {
        &self.plan
    }

    pub fn group_count(&self) -> usize {
        self.plan.len()
    }

    pub fn encoder_params(&self) -> usize {
        self.store.numel_with_prefix("enc.")
    }

    pub fn decoder_params(&self) -> usize {
        self.store.numel_with_prefix("dec.") + self.store.numel_with_prefix("global.")
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.bands {
            return Err(Error::CheckpointMismatch(format!("model built for {} bands, input has {c}", self.bands)));
        }
        let r = self.config.latent_downscale;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Indivisible { height: h, width: w, factor: r });
        }
        Ok(())
    }

    /// `[N, C, H, W]` → stacked latents `[G·N, L, H/r, W/r]`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let groups = g.stack_groups(x, &self.plan)?;
        run(&self.encoder, self.act, g, &self.store, groups)
    }

    /// Local decoding of stacked latents to stacked groups `[G·N, n_subs, H, W]`.
    pub fn local_decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let [_, l, _, _] = g.value(z).shape();
        if l != self.config.latent_channels {
            return Err(Error::CheckpointMismatch(format!("latents have {l} channels, model expects {}", self.config.latent_channels)));
        }
        let y = run(&self.local, self.act, g, &self.store, z)?;
        match self.config.latent_downscale {
            1 => Ok(y),
            r => Ok(g.pixel_shuffle(y, r)?),
        }
    }

    /// Stacked latents → `[N, C, H, W]`: local decoding, overlap mean, then
    /// the global residual refinement.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let groups = self.local_decode_graph(g, z)?;
        let merged = g.merge_groups(groups, &self.plan, self.bands)?;
        if self.global.is_empty() {
            return Ok(merged);
        }
        let residual = run(&self.global, self.act, g, &self.store, merged)?;
        Ok(g.add(merged, residual))
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentList> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, xv)?;
        LatentList::from_stacked(g.value(z), self.plan.clone(), self.bands)
    }

    pub fn decode_tensor(&self, latents: &LatentList) -> Result<Tensor> {
        if latents.plan != self.plan || latents.bands != self.bands {
            return Err(Error::CheckpointMismatch(format!(
                "latent plan {:?} over {} bands vs model plan {:?} over {}",
                latents.plan, latents.bands, self.plan, self.bands
            )));
        }
        let mut g = Graph::inference();
        let z = g.constant(latents.stacked());
        let y = self.decode_graph(&mut g, z)?;
        Ok(g.into_value(y))
    }

    pub fn encode(&self, cube: &HsiCube) -> Result<LatentList> {
        self.encode_tensor(&cube.to_tensor())
    }

    pub fn decode(&self, latents: &LatentList) -> Result<HsiCube> {
        HsiCube::from_tensor(&self.decode_tensor(latents)?, 0)
    }

    pub fn reconstruct(&self, cube: &HsiCube) -> Result<HsiCube> {
        self.decode(&self.encode(cube)?)
    }

    /// Merge of the locally decoded groups, bypassing the global decoder.
    pub fn decode_local_merged(&self, latents: &LatentList) -> Result<HsiCube> {
        let mut g = Graph::inference();
        let z = g.constant(latents.stacked());
        let groups = self.local_decode_graph(&mut g, z)?;
        let merged = g.merge_groups(groups, &self.plan, self.bands)?;
        HsiCube::from_tensor(g.value(merged), 0)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_store("gae.", &self.store);
        ck.set_meta("kind", "gae");
        ck.set_meta("gae_config", serde_json::to_string(&self.config)?);
        ck.set_meta("grouping", serde_json::to_string(&self.grouping)?);
        ck.set_meta("bands", self.bands);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks `{k}`")));
        let config: GaeConfig = serde_json::from_str(meta("gae_config")?)?;
        let grouping: GroupingConfig = serde_json::from_str(meta("grouping")?)?;
        let bands: usize = meta("bands")?.parse().map_err(|_| Error::CheckpointMismatch("bad `bands`".into()))?;
        let mut model = Self::new(config, grouping, bands, 0)?;
        ck.load_store("gae.", &mut model.store).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(model)
    }

    /// Fails unless the model was built with exactly these settings.
    pub fn check_matches(&self, config: &GaeConfig, grouping: &GroupingConfig, bands: usize) -> Result<()> {
        if &self.config != config || &self.grouping != grouping || self.bands != bands {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {:?}/{:?}/{} bands, configuration asks for {:?}/{:?}/{}",
                self.config, self.grouping, self.bands, config, grouping, bands
            )));
        }
        Ok(())
    }
}

/// Stage-1 optimizer loop. Batches depend only on the seed and step index,
/// and checkpoints carry the Adam state, so training can be resumed exactly.
pub struct GaeTrainer {
    pub model: Gae,
    pub adam: Adam,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub step: usize,
    pub history: Vec<LossBreakdown>,
}

impl GaeTrainer {
    pub fn new(model: Gae, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let adam = Adam::new(train.adam(), &model.store);
        Ok(Self { model, adam, train, loss, step: 0, history: Vec::new() })
    }

    /// One optimizer step on a batch drawn from `patches` (HR cubes).
    pub fn step(&mut self, patches: &[HsiCube], phi: &dyn FeatureExtractor) -> Result<LossBreakdown> {
        use rand::Rng;
        if patches.is_empty() {
            return Err(Error::Config("no training patches".into()));
        }
        let mut rng = self.train.step_rng(self.step);
        let batch: Vec<&HsiCube> = (0..self.train.batch_size).map(|_| &patches[rng.random_range(0..patches.len())]).collect();
        let x = HsiCube::batch_tensor(&batch)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = self.model.encode_graph(&mut g, xv)?;
        let re = self.model.decode_graph(&mut g, z)?;
        let nodes = graph_loss(&mut g, re, xv, &self.loss, phi)?;
        let out = nodes.breakdown(&g);
        if !out.total.is_finite() {
            return Err(Error::Numerical { step: self.step, what: format!("stage-1 loss is {}", out.total) });
        }
        let grads = g.backward(nodes.total).param_grads(&g, &self.model.store);
        let lr = self.train.lr_at(self.step);
        self.adam.step_with_lr(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        self.history.push(out);
        if self.train.log_every > 0 && self.step % self.train.log_every == 0 {
            log::info!("stage1 step {:>6} loss {:.6} (l1 {:.6} sam {:.6} grad {:.6})", self.step, out.total, out.l1, out.sam, out.gradient);
        }
        Ok(out)
    }

    /// Runs until `train.steps` steps have been taken.
    pub fn run(&mut self, patches: &[HsiCube], phi: &dyn FeatureExtractor) -> Result<()> {
        while self.step < self.train.steps {
            self.step(patches, phi)?;
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

    pub fn resume(ck: &Checkpoint, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        let model = Gae::from_checkpoint(ck)?;
        let mut trainer = Self::new(model, train, loss)?;
        trainer.adam.load_state(&trainer.model.store, |k| ck.get(k))?;
        trainer.step = trainer.adam.steps_taken() as usize;
        Ok(trainer)
    }
}
