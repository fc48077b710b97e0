//! Conditional progressive generator and critic.
//!
//! Generator: the latent code alone produces the 4x4 stage. Every later
//! up-block takes the previous features concatenated with the mask pooled to
//! that previous resolution, doubles the size, and applies two 3x3 convs.
//!
//! Critic: the image and the mask at the top resolution enter as two
//! channels. Each down-block sees its features concatenated with the mask at
//! its own resolution, so the mask is re-injected after every downsample.
//! The last block works at 4x4 (with an optional minibatch-stddev channel)
//! and ends in two dense layers producing an unbounded score.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::schedule::{is_supported_resolution, StagePos};
use crate::error::{Error, Result};
use crate::nn::{self, leaky_relu, pixel_norm, Conv2d, ConvSpec, Dense, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: i64,
    pub target_resolution: i64,
    /// Feature maps at resolution `r` are `min(fmap_base / r, fmap_max)`.
    pub fmap_base: i64,
    pub fmap_max: i64,
    pub pixel_norm: bool,
    pub minibatch_stddev: bool,
    pub equalized_lr: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            target_resolution: 64,
            fmap_base: 1024,
            fmap_max: 64,
            pixel_norm: true,
            minibatch_stddev: true,
            equalized_lr: true,
        }
    }
}

impl GanConfig {
    /// Narrow networks for 64x64 single-core training.
    pub fn desk() -> Self {
        Self {
            fmap_base: 256,
            fmap_max: 32,
            ..Self::default()
        }
    }

    pub fn channels(&self, resolution: i64) -> i64 {
        (self.fmap_base / resolution).clamp(1, self.fmap_max)
    }

    pub fn num_stages(&self) -> usize {
        (self.target_resolution.trailing_zeros() - 1) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !is_supported_resolution(self.target_resolution) || self.target_resolution < 8 {
            return Err(Error::BadResolution(self.target_resolution));
        }
        if self.latent_dim < 1 || self.fmap_base < 1 || self.fmap_max < 1 {
            return Err(Error::InvalidConfig("GAN widths must be positive".into()));
        }
        Ok(())
    }
}

/// Average-pools `mask` (`[B,1,R,R]`) to every power-of-two resolution down
/// to 4, keyed by resolution.
pub fn mask_levels(mask: &Tensor) -> Result<BTreeMap<i64, Tensor>> {
    let size = mask.size();
    if size.len() != 4 || size[1] != 1 || size[2] != size[3] || !is_supported_resolution(size[2]) {
        return Err(Error::Shape(format!("mask must be [B,1,R,R] with R a power of two, got {size:?}")));
    }
    let mut levels = BTreeMap::new();
    let mut cur = mask.shallow_clone();
    let mut r = size[2];
    levels.insert(r, cur.shallow_clone());
    while r > 4 {
        cur = cur.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
        r /= 2;
        levels.insert(r, cur.shallow_clone());
    }
    Ok(levels)
}

fn level(levels: &BTreeMap<i64, Tensor>, r: i64) -> Result<&Tensor> {
    levels
        .get(&r)
        .ok_or_else(|| Error::Shape(format!("mask is coarser than the {r}x{r} stage")))
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_nearest2d([s[2] * 2, s[3] * 2], None::<f64>, None::<f64>)
}

pub fn downsample2(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>)
}

fn minibatch_stddev(x: &Tensor) -> Tensor {
    let s = x.size();
    let mean = x.mean_dim(0, true, x.kind());
    let std = ((x - mean).square().mean_dim(0, false, x.kind()) + 1e-8).sqrt();
    let stat = std.mean(x.kind());
    Tensor::cat(&[x.shallow_clone(), stat.view([1, 1, 1, 1]).expand([s[0], 1, s[2], s[3]], false)], 1)
}

struct UpBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct Generator {
    cfg: GanConfig,
    store: ParamStore,
    dense: Dense,
    conv4: Conv2d,
    blocks: Vec<UpBlock>,
    to_image: Vec<Conv2d>,
}

impl Generator {
    pub fn new(cfg: &GanConfig, seed: u64, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eq = cfg.equalized_lr;
        let c4 = cfg.channels(4);
        let dense = Dense::new(
            &mut store,
            "dense",
            cfg.latent_dim,
            c4 * 16,
            std::f64::consts::SQRT_2 / 4.0,
            eq,
            &mut rng,
            kind,
        );
        let conv4 = Conv2d::new(&mut store, "conv4", ConvSpec::same(c4, c4, 3).equalized(eq), &mut rng, kind);
        let mut blocks = Vec::new();
        let mut to_image = vec![Conv2d::new(
            &mut store,
            "to_image.4",
            ConvSpec::same(c4, 1, 1).gain(1.0).equalized(eq),
            &mut rng,
            kind,
        )];
        for stage in 1..cfg.num_stages() {
            let r = 4 << stage;
            let (cin, cout) = (cfg.channels(r / 2), cfg.channels(r));
            blocks.push(UpBlock {
                conv1: Conv2d::new(&mut store, &format!("up.{r}.conv1"), ConvSpec::same(cin + 1, cout, 3).equalized(eq), &mut rng, kind),
                conv2: Conv2d::new(&mut store, &format!("up.{r}.conv2"), ConvSpec::same(cout, cout, 3).equalized(eq), &mut rng, kind),
            });
            to_image.push(Conv2d::new(
                &mut store,
                &format!("to_image.{r}"),
                ConvSpec::same(cout, 1, 1).gain(1.0).equalized(eq),
                &mut rng,
                kind,
            ));
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            dense,
            conv4,
            blocks,
            to_image,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn norm_act(&self, x: &Tensor) -> Tensor {
        let x = leaky_relu(x);
        if self.cfg.pixel_norm {
            pixel_norm(&x)
        } else {
            x
        }
    }

    /// `z`: `[B, latent_dim]`; `mask`: `[B,1,R,R]` at any resolution at or
    /// above the stage resolution. Returns `[B,1,r,r]` in `[-1, 1]`.
    pub fn forward(&self, z: &Tensor, mask: &Tensor, pos: StagePos) -> Result<Tensor> {
        let stages = self.cfg.num_stages();
        if pos.stage >= stages {
            return Err(Error::StageOutOfRange { stage: pos.stage, stages });
        }
        let zs = z.size();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latent must be [B,{}], got {zs:?}", self.cfg.latent_dim)));
        }
        if mask.size()[0] != zs[0] {
            return Err(Error::Shape("latent and mask batch sizes differ".into()));
        }
        let levels = mask_levels(mask)?;
        let z = if self.cfg.pixel_norm { pixel_norm(&z.unsqueeze(-1).unsqueeze(-1)).flatten(1, -1) } else { z.shallow_clone() };
        let c4 = self.cfg.channels(4);
        let mut h = self.norm_act(&self.dense.forward(&z).view([zs[0], c4, 4, 4]));
        h = self.norm_act(&self.conv4.forward(&h));
        let mut prev = None;
        for (i, block) in self.blocks.iter().take(pos.stage).enumerate() {
            let r = 4 << (i + 1);
            let m = level(&levels, r / 2)?;
            let x = upsample2(&Tensor::cat(&[h.shallow_clone(), m.to_kind(h.kind())], 1));
            let x = self.norm_act(&block.conv1.forward(&x));
            let x = self.norm_act(&block.conv2.forward(&x));
            prev = Some(h);
            h = x;
        }
        let out = self.to_image[pos.stage].forward(&h);
        let out = match prev {
            Some(p) if pos.alpha < 1.0 => {
                let skip = upsample2(&self.to_image[pos.stage - 1].forward(&p));
                out * pos.alpha + skip * (1.0 - pos.alpha)
            }
            _ => out,
        };
        Ok(out.tanh())
    }
}

struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct Critic {
    cfg: GanConfig,
    store: ParamStore,
    from_image: Vec<Conv2d>,
    blocks: Vec<DownBlock>,
    conv4: Conv2d,
    dense1: Dense,
    dense2: Dense,
}

impl Critic {
    pub fn new(cfg: &GanConfig, seed: u64, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eq = cfg.equalized_lr;
        let mut from_image = Vec::new();
        let mut blocks = Vec::new();
        for stage in 0..cfg.num_stages() {
            let r = 4 << stage;
            from_image.push(Conv2d::new(
                &mut store,
                &format!("from_image.{r}"),
                ConvSpec::same(2, cfg.channels(r), 1).equalized(eq),
                &mut rng,
                kind,
            ));
            if stage > 0 {
                let (cin, cout) = (cfg.channels(r), cfg.channels(r / 2));
                blocks.push(DownBlock {
                    conv1: Conv2d::new(&mut store, &format!("down.{r}.conv1"), ConvSpec::same(cin + 1, cin, 3).equalized(eq), &mut rng, kind),
                    conv2: Conv2d::new(&mut store, &format!("down.{r}.conv2"), ConvSpec::same(cin, cout, 3).equalized(eq), &mut rng, kind),
                });
            }
        }
        let c4 = cfg.channels(4);
        let extra = if cfg.minibatch_stddev { 2 } else { 1 };
        let conv4 = Conv2d::new(&mut store, "conv4", ConvSpec::same(c4 + extra, c4, 3).equalized(eq), &mut rng, kind);
        let dense1 = Dense::new(&mut store, "dense1", c4 * 16, c4, std::f64::consts::SQRT_2, eq, &mut rng, kind);
        let dense2 = Dense::new(&mut store, "dense2", c4, 1, 1.0, eq, &mut rng, kind);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            from_image,
            blocks,
            conv4,
            dense1,
            dense2,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn from_image_at(&self, stage: usize, image: &Tensor, levels: &BTreeMap<i64, Tensor>) -> Result<Tensor> {
        let m = level(levels, 4 << stage)?;
        Ok(leaky_relu(&self.from_image[stage].forward(&Tensor::cat(&[image.shallow_clone(), m.to_kind(image.kind())], 1))))
    }

    fn down_block(&self, stage: usize, h: &Tensor, levels: &BTreeMap<i64, Tensor>) -> Result<Tensor> {
        let block = &self.blocks[stage - 1];
        let m = level(levels, 4 << stage)?;
        let x = Tensor::cat(&[h.shallow_clone(), m.to_kind(h.kind())], 1);
        let x = leaky_relu(&block.conv1.forward(&x));
        let x = leaky_relu(&block.conv2.forward(&x));
        Ok(downsample2(&x))
    }

    /// `image`: `[B,1,r,r]` at the stage resolution; `mask`: `[B,1,R,R]`
    /// with `R >= r`. Returns `[B]` scores.
    pub fn forward(&self, image: &Tensor, mask: &Tensor, pos: StagePos) -> Result<Tensor> {
        let stages = self.cfg.num_stages();
        if pos.stage >= stages {
            return Err(Error::StageOutOfRange { stage: pos.stage, stages });
        }
        let r = pos.resolution();
        let s = image.size();
        if s.len() != 4 || s[1] != 1 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("critic at stage {} expects [B,1,{r},{r}], got {s:?}", pos.stage)));
        }
        if mask.size()[0] != s[0] {
            return Err(Error::Shape("image and mask batch sizes differ".into()));
        }
        let levels = mask_levels(mask)?;
        let mut h = self.from_image_at(pos.stage, image, &levels)?;
        if pos.stage > 0 {
            h = self.down_block(pos.stage, &h, &levels)?;
            if pos.alpha < 1.0 {
                let skip = self.from_image_at(pos.stage - 1, &downsample2(image), &levels)?;
                h = h * pos.alpha + skip * (1.0 - pos.alpha);
            }
            for stage in (1..pos.stage).rev() {
                h = self.down_block(stage, &h, &levels)?;
            }
        }
        let m4 = level(&levels, 4)?.to_kind(h.kind());
        let mut x = Tensor::cat(&[h, m4], 1);
        if self.cfg.minibatch_stddev {
            x = minibatch_stddev(&x);
        }
        let x = leaky_relu(&self.conv4.forward(&x));
        let x = leaky_relu(&self.dense1.forward(&x.flatten(1, -1)));
        Ok(self.dense2.forward(&x).view([-1]))
    }
}

/// Generator and critic with a shared configuration.
pub struct Cpggan {
    pub generator: Generator,
    pub critic: Critic,
}

impl Cpggan {
    pub fn new(cfg: &GanConfig, seed: u64, kind: Kind) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(cfg, seed, kind)?,
            critic: Critic::new(cfg, seed.wrapping_add(0x9e37_79b9), kind)?,
        })
    }

    pub fn config(&self) -> &GanConfig {
        self.generator.config()
    }

    pub fn sample_latent(&self, batch: i64, rng: &mut ChaCha8Rng, kind: Kind) -> Tensor {
        nn::uniform(rng, &[batch, self.config().latent_dim], -1.0, 1.0, kind)
    }
}
