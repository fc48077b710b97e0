//! Conditional progressive GAN: growth schedule, networks and losses.

mod loss;
mod nets;
mod schedule;

use image::{GrayImage, Luma};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

pub use loss::{critic_loss, generator_loss, gradient_penalty, input_gradient, sample_epsilon, GanLossConfig};
pub use nets::{downsample2, mask_levels, upsample2, Cpggan, Critic, GanConfig, Generator};
pub use schedule::{build_schedule, is_supported_resolution, ProgressiveSchedule, StagePos};

use crate::error::{Error, Result};
use crate::mask::ConditioningMask;

/// What the trainer and sampler need from a box-conditioned GAN.
pub trait ConditionalGan {
    /// Model family tag stored in checkpoints.
    fn family(&self) -> &'static str;

    fn kind(&self) -> Kind;

    /// Full output resolution.
    fn target_resolution(&self) -> i64;

    fn sample_latent(&self, batch: i64, rng: &mut ChaCha8Rng) -> Tensor;

    /// Images in `[-1, 1]` at the resolution of `pos`.
    fn generate(&self, latent: &Tensor, masks: &Tensor, pos: StagePos, train: bool) -> Result<Tensor>;

    /// One unbounded score per image.
    fn critique(&self, images: &Tensor, masks: &Tensor, pos: StagePos) -> Result<Tensor>;

    fn generator_params(&self) -> Vec<Tensor>;

    fn critic_params(&self) -> Vec<Tensor>;

    fn named_tensors(&self) -> Vec<(String, Tensor)>;

    fn load_tensors(&mut self, named: &[(String, Tensor)]) -> Result<()>;
}

impl ConditionalGan for Cpggan {
    fn family(&self) -> &'static str {
        "cpggan"
    }

    fn kind(&self) -> Kind {
        self.generator.store().trainable()[0].kind()
    }

    fn target_resolution(&self) -> i64 {
        self.config().target_resolution
    }

    fn sample_latent(&self, batch: i64, rng: &mut ChaCha8Rng) -> Tensor {
        Cpggan::sample_latent(self, batch, rng, ConditionalGan::kind(self))
    }

    fn generate(&self, latent: &Tensor, masks: &Tensor, pos: StagePos, _train: bool) -> Result<Tensor> {
        self.generator.forward(latent, masks, pos)
    }

    fn critique(&self, images: &Tensor, masks: &Tensor, pos: StagePos) -> Result<Tensor> {
        self.critic.forward(images, masks, pos)
    }

    fn generator_params(&self) -> Vec<Tensor> {
        self.generator.store().trainable()
    }

    fn critic_params(&self) -> Vec<Tensor> {
        self.critic.store().trainable()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = self.generator.store().named("generator");
        v.extend(self.critic.store().named("critic"));
        v
    }

    fn load_tensors(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.generator.store_mut().load("generator", named)?;
        self.critic.store_mut().load("critic", named)
    }
}

/// Stacks 8-bit images into `[B,1,R,R]` scaled to `[-1, 1]`.
pub fn images_to_tensor(images: &[&GrayImage], kind: Kind) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::EmptyDataset("no images to stack"));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend(img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    Ok(Tensor::from_slice(&data)
        .view([images.len() as i64, 1, h as i64, w as i64])
        .to_kind(kind))
}

/// Stacks masks into `[B,1,R,R]` with values in `[0, 1]`.
pub fn masks_to_tensor(masks: &[&ConditioningMask], kind: Kind) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::EmptyDataset("no masks to stack"));
    };
    let r = first.resolution();
    let mut data = Vec::with_capacity(masks.len() * (r * r) as usize);
    for m in masks {
        if m.resolution() != r {
            return Err(Error::Shape("masks in a batch differ in resolution".into()));
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_slice(&data)
        .view([masks.len() as i64, 1, r as i64, r as i64])
        .to_kind(kind))
}

/// Converts `[B,1,R,R]` in `[-1, 1]` back to 8-bit images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<GrayImage>> {
    let s = t.size();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [B,1,H,W], got {s:?}")));
    }
    let (b, h, w) = (s[0] as usize, s[2] as u32, s[3] as u32);
    let flat = Vec::<f32>::try_from(t.detach().to_kind(Kind::Float).contiguous().view([-1]))?;
    let n = (h * w) as usize;
    Ok((0..b)
        .map(|i| {
            let chunk = &flat[i * n..(i + 1) * n];
            GrayImage::from_fn(w, h, |x, y| {
                let v = chunk[(y * w + x) as usize];
                Luma([((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8])
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_round_trip() {
        let img = GrayImage::from_fn(8, 8, |x, y| Luma([(x * 30 + y) as u8]));
        let t = images_to_tensor(&[&img, &img], Kind::Float).unwrap();
        assert_eq!(t.size(), vec![2, 1, 8, 8]);
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[1], img);
    }
}
