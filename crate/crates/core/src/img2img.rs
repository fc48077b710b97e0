//! Encoder-decoder baseline: a U-Net generator mapping a box mask plus
//! noise to an image at the mask's resolution, and a three-stage
//! downsampling critic on `(image, mask)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::gan::{ConditionalGan, ProgressiveSchedule, StagePos};
use crate::nn::{self, leaky_relu, BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d, ParamStore};
use crate::trainer::{train_model, GanTrainConfig, TrainedGan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NoiseMode {
    /// One spatial noise channel concatenated to the mask.
    Field,
    /// Mask only; whole decoder channels are dropped with probability `p`
    /// in the two innermost decoder levels.
    Dropout { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub resolution: i64,
    pub base_channels: i64,
    pub max_channels: i64,
    pub noise: NoiseMode,
    pub critic_channels: i64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 16,
            max_channels: 128,
            noise: NoiseMode::Field,
            critic_channels: 16,
        }
    }
}

pub const DEPTH: usize = 4;

impl UNetConfig {
    fn channels(&self, level: usize) -> i64 {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !(self.resolution as u64).is_power_of_two() {
            return Err(Error::BadResolution(self.resolution));
        }
        if self.base_channels < 1 || self.max_channels < self.base_channels || self.critic_channels < 1 {
            return Err(Error::InvalidConfig("U-Net widths must be positive and ordered".into()));
        }
        if let NoiseMode::Dropout { p } = self.noise {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Channels dropped per sample in dropout mode.
    fn dropout_units(&self) -> i64 {
        self.channels(DEPTH - 2) + self.channels(DEPTH - 3)
    }
}

struct Down {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

struct Up {
    deconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

pub struct UNetGenerator {
    cfg: UNetConfig,
    store: ParamStore,
    down: Vec<Down>,
    up: Vec<Up>,
    /// Replaces skip features with zeros; for tests of the skip path.
    pub sever_skips: bool,
}

impl UNetGenerator {
    pub fn new(cfg: &UNetConfig, seed: u64, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_ch = match cfg.noise {
            NoiseMode::Field => 2,
            NoiseMode::Dropout { .. } => 1,
        };
        let mut down = Vec::new();
        let mut prev = in_ch;
        for i in 0..DEPTH {
            let out = cfg.channels(i);
            let spec = ConvSpec::same(prev, out, 4).strided(2, 1).equalized(false);
            down.push(Down {
                conv: Conv2d::new(&mut store, &format!("enc{i}"), spec, &mut rng, kind),
                bn: (i > 0).then(|| BatchNorm2d::new(&mut store, &format!("enc{i}.bn"), out, kind)),
            });
            prev = out;
        }
        let mut up = Vec::new();
        for i in 0..DEPTH {
            // Decoder level i mirrors encoder level DEPTH-1-i.
            let level = DEPTH - 1 - i;
            let in_ch = if i == 0 { cfg.channels(level) } else { 2 * cfg.channels(level) };
            let last = i == DEPTH - 1;
            let out = if last { 1 } else { cfg.channels(level - 1) };
            up.push(Up {
                deconv: ConvTranspose2d::new(&mut store, &format!("dec{i}"), in_ch, out, &mut rng, kind),
                bn: (!last).then(|| BatchNorm2d::new(&mut store, &format!("dec{i}.bn"), out, kind)),
            });
        }
        Ok(Self {
            cfg: *cfg,
            store,
            down,
            up,
            sever_skips: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `mask`: `[B,1,R,R]`; `noise`: `[B,1,R,R]` in field mode or
    /// `[B, U]` uniform draws in dropout mode. Returns `[B,1,R,R]` in
    /// `[-1, 1]`.
    pub fn forward(&self, mask: &Tensor, noise: &Tensor, train: bool) -> Result<Tensor> {
        let ms = mask.size();
        let r = self.cfg.resolution;
        if ms.len() != 4 || ms[1] != 1 || ms[2] != r || ms[3] != r {
            return Err(Error::Shape(format!("mask must be [B,1,{r},{r}], got {ms:?}")));
        }
        let b = ms[0];
        let (mut h, drop) = match self.cfg.noise {
            NoiseMode::Field => {
                if noise.size() != ms {
                    return Err(Error::Shape(format!("noise field {:?} does not match mask {ms:?}", noise.size())));
                }
                (Tensor::cat(&[mask.shallow_clone(), noise.to_kind(mask.kind())], 1), None)
            }
            NoiseMode::Dropout { p } => {
                if noise.size() != [b, self.cfg.dropout_units()] {
                    return Err(Error::Shape(format!("dropout draws must be [{b},{}]", self.cfg.dropout_units())));
                }
                let keep = noise.ge(p).to_kind(mask.kind()) / (1.0 - p);
                (mask.shallow_clone(), Some(keep))
            }
        };
        let mut skips = Vec::with_capacity(DEPTH);
        for d in &self.down {
            h = d.conv.forward(&h);
            if let Some(bn) = &d.bn {
                h = bn.forward(&h, train);
            }
            h = leaky_relu(&h);
            skips.push(h.shallow_clone());
        }
        let mut offset = 0;
        for (i, u) in self.up.iter().enumerate() {
            if i > 0 {
                let skip = &skips[DEPTH - 1 - i];
                let skip = if self.sever_skips { skip.zeros_like() } else { skip.shallow_clone() };
                h = Tensor::cat(&[h, skip], 1);
            }
            h = u.deconv.forward(&h);
            if let Some(bn) = &u.bn {
                h = bn.forward(&h, train).relu();
            }
            if let (Some(keep), true) = (&drop, i < 2) {
                let c = h.size()[1];
                h = &h * keep.narrow(1, offset, c).view([b, c, 1, 1]);
                offset += c;
            }
        }
        Ok(h.tanh())
    }
}

pub struct PatchCritic {
    store: ParamStore,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchCritic {
    pub fn new(cfg: &UNetConfig, seed: u64, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut prev = 2;
        for i in 0..3 {
            let out = cfg.critic_channels << i;
            let spec = ConvSpec::same(prev, out, 4).strided(2, 1).equalized(false);
            convs.push(Conv2d::new(&mut store, &format!("down{i}"), spec, &mut rng, kind));
            prev = out;
        }
        let out = Conv2d::new(&mut store, "out", ConvSpec::same(prev, 1, 3).gain(1.0).equalized(false), &mut rng, kind);
        Ok(Self { store, convs, out })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mean patch score per image.
    pub fn forward(&self, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if image.size() != mask.size() {
            return Err(Error::Shape(format!("image {:?} and mask {:?} differ", image.size(), mask.size())));
        }
        let mut h = Tensor::cat(&[image.shallow_clone(), mask.to_kind(image.kind())], 1);
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h));
        }
        Ok(self.out.forward(&h).mean_dim([1i64, 2, 3].as_slice(), false, image.kind()))
    }
}

pub struct Img2Img {
    pub generator: UNetGenerator,
    pub critic: PatchCritic,
}

impl Img2Img {
    pub fn new(cfg: &UNetConfig, seed: u64, kind: Kind) -> Result<Self> {
        Ok(Self {
            generator: UNetGenerator::new(cfg, seed, kind)?,
            critic: PatchCritic::new(cfg, seed.wrapping_add(0x9e37_79b9), kind)?,
        })
    }
}

impl ConditionalGan for Img2Img {
    fn family(&self) -> &'static str {
        "img2img"
    }

    fn kind(&self) -> Kind {
        self.generator.store.trainable()[0].kind()
    }

    fn target_resolution(&self) -> i64 {
        self.generator.cfg.resolution
    }

    fn sample_latent(&self, batch: i64, rng: &mut ChaCha8Rng) -> Tensor {
        let cfg = &self.generator.cfg;
        match cfg.noise {
            NoiseMode::Field => nn::uniform(rng, &[batch, 1, cfg.resolution, cfg.resolution], -1.0, 1.0, self.kind()),
            NoiseMode::Dropout { .. } => {
                let v: Vec<f32> = (0..batch * cfg.dropout_units()).map(|_| rng.random::<f32>()).collect();
                Tensor::from_slice(&v).view([batch, cfg.dropout_units()]).to_kind(self.kind())
            }
        }
    }

    fn generate(&self, latent: &Tensor, masks: &Tensor, _pos: StagePos, train: bool) -> Result<Tensor> {
        self.generator.forward(masks, latent, train)
    }

    fn critique(&self, images: &Tensor, masks: &Tensor, _pos: StagePos) -> Result<Tensor> {
        self.critic.forward(images, masks)
    }

    fn generator_params(&self) -> Vec<Tensor> {
        self.generator.store.trainable()
    }

    fn critic_params(&self) -> Vec<Tensor> {
        self.critic.store.trainable()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = self.generator.store.named("generator");
        v.extend(self.critic.store.named("critic"));
        v
    }

    fn load_tensors(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.generator.store.load("generator", named)?;
        self.critic.store.load("critic", named)
    }
}

/// Trains the baseline with the shared adversarial loop at a single
/// resolution.
pub fn train_img2img(
    unet: &UNetConfig,
    config: &GanTrainConfig,
    records: &[ImageRecord],
    normals: &[ImageRecord],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedGan<Img2Img>> {
    let model = Img2Img::new(unet, config.seed, Kind::Float)?;
    let schedule = ProgressiveSchedule::single(unet.resolution);
    train_model(model, serde_json::to_value(unet)?, config, records, normals, &schedule, checkpoint_dir)
}

pub fn load_img2img(path: &Path) -> Result<TrainedGan<Img2Img>> {
    let (header, tensors) = nn::load_checkpoint(path, "img2img", None)?;
    let stored = header.config["model"].clone();
    if nn::config_hash(&stored) != header.config_hash {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "stored config does not match its hash".into(),
        });
    }
    let cfg: UNetConfig = serde_json::from_value(stored)?;
    let mut model = Img2Img::new(&cfg, 0, Kind::Float)?;
    model.load_tensors(&tensors)?;
    Ok(TrainedGan {
        model,
        header,
        history: Vec::new(),
        batch_ids: Default::default(),
    })
}
