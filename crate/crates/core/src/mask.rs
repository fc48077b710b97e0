//! Box conditioning images.
//!
//! A conditioning mask is a black image with the requested lesion boxes
//! painted white (255 in storage, 1.0 once normalized). Lower-resolution
//! copies come from repeated 2x2 average pooling, so box edges turn into
//! fractional coverage rather than disappearing.

use image::{GrayImage, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Single-channel mask, stored normalized to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMask {
    resolution: u32,
    data: Vec<f32>,
}

impl ConditioningMask {
    pub fn zeros(resolution: u32) -> Self {
        Self {
            resolution,
            data: vec![0.0; (resolution * resolution) as usize],
        }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.resolution + x) as usize]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// 8-bit storage view: box interior 255, background 0 (fractional
    /// coverage is rounded at pooled levels).
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.resolution, self.resolution, |x, y| {
            Luma([(self.at(x, y) * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let r = self.resolution as usize;
        let mut data = vec![0.0; r * r];
        for y in 0..r {
            for x in 0..r {
                data[y * r + x] = self.data[y * r + (r - 1 - x)];
            }
        }
        Self {
            resolution: self.resolution,
            data,
        }
    }

    /// Pixelwise maximum; the mask of a box-set union.
    pub fn max(&self, other: &Self) -> Result<Self> {
        if self.resolution != other.resolution {
            return Err(Error::Shape(format!(
                "mask resolutions {} and {} differ",
                self.resolution, other.resolution
            )));
        }
        Ok(Self {
            resolution: self.resolution,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.max(*b)).collect(),
        })
    }
}

/// Paints `boxes` white on a `size` x `size` black image.
pub fn build_mask(boxes: &[BoundingBox], size: u32) -> Result<ConditioningMask> {
    let mut mask = ConditioningMask::zeros(size);
    for b in boxes {
        b.check_within(size, size)?;
        for y in b.y_min..b.y_max {
            let row = (y as u32 * size) as usize;
            mask.data[row + b.x_min as usize..row + b.x_max as usize].fill(1.0);
        }
    }
    Ok(mask)
}

/// Average-pools `mask` down to `target` by repeated 2x2 halving.
pub fn downsample_mask(mask: &ConditioningMask, target: u32) -> Result<ConditioningMask> {
    let src = mask.resolution;
    if target == 0 || target > src || src % target != 0 || !(src / target).is_power_of_two() {
        return Err(Error::Shape(format!(
            "cannot pool a {src} mask to {target}: ratio is not a power of two"
        )));
    }
    let mut cur = mask.clone();
    while cur.resolution > target {
        let r = cur.resolution as usize;
        let h = r / 2;
        let mut data = vec![0.0f32; h * h];
        for y in 0..h {
            for x in 0..h {
                let i = 2 * y * r + 2 * x;
                data[y * h + x] = 0.25 * (cur.data[i] + cur.data[i + 1] + cur.data[i + r] + cur.data[i + r + 1]);
            }
        }
        cur = ConditioningMask {
            resolution: h as u32,
            data,
        };
    }
    Ok(cur)
}

/// Every level from full resolution down to `min_resolution`, finest first.
pub fn mask_pyramid(mask: &ConditioningMask, min_resolution: u32) -> Result<Vec<ConditioningMask>> {
    let mut levels = vec![mask.clone()];
    let mut r = mask.resolution;
    while r > min_resolution {
        r /= 2;
        levels.push(downsample_mask(levels.last().unwrap(), r)?);
    }
    Ok(levels)
}

/// One shared geometric transform applied to a whole box set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTransform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Translation in pixels.
    pub shift_x: f64,
    pub shift_y: f64,
    /// Isotropic zoom about the image centre.
    pub zoom: f64,
}

impl AnnotationTransform {
    pub const IDENTITY: Self = Self {
        flip_horizontal: false,
        flip_vertical: false,
        shift_x: 0.0,
        shift_y: 0.0,
        zoom: 1.0,
    };

    /// Flip each axis with probability 1/2, shift up to `max_shift` of the
    /// image side, zoom within `1 ± max_zoom`.
    pub fn sample(image_size: u32, max_shift: f64, max_zoom: f64, rng: &mut impl Rng) -> Self {
        let s = image_size as f64;
        let mut uniform = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift_x = uniform(max_shift * s);
        let shift_y = uniform(max_shift * s);
        let zoom = 1.0 + uniform(max_zoom);
        Self {
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            shift_x,
            shift_y,
            zoom,
        }
    }

    /// Maps a single coordinate along one axis of length `size`.
    fn map(&self, v: f64, size: f64, flip: bool, shift: f64) -> f64 {
        let v = if flip { size - v } else { v };
        let c = size / 2.0;
        c + (v - c) * self.zoom + shift
    }

    /// Transforms and clamps one box; `None` if it leaves the image.
    pub fn apply(&self, b: &BoundingBox, image_size: u32) -> Option<BoundingBox> {
        let s = image_size as f64;
        let xa = self.map(b.x_min as f64, s, self.flip_horizontal, self.shift_x);
        let xb = self.map(b.x_max as f64, s, self.flip_horizontal, self.shift_x);
        let ya = self.map(b.y_min as f64, s, self.flip_vertical, self.shift_y);
        let yb = self.map(b.y_max as f64, s, self.flip_vertical, self.shift_y);
        BoundingBox {
            x_min: xa.min(xb).round() as i32,
            y_min: ya.min(yb).round() as i32,
            x_max: xa.max(xb).round() as i32,
            y_max: ya.max(yb).round() as i32,
        }
        .clamped(image_size, image_size)
    }

    pub fn apply_all(&self, boxes: &[BoundingBox], image_size: u32) -> Vec<BoundingBox> {
        boxes.iter().filter_map(|b| self.apply(b, image_size)).collect()
    }
}

/// Test-time annotation augmentation: random flips, shift up to 10% and
/// zoom up to 10%, one shared draw per box set. Boxes pushed fully outside
/// the image are dropped.
pub fn augment_annotation(boxes: &[BoundingBox], image_size: u32, rng: &mut impl Rng) -> Vec<BoundingBox> {
    AnnotationTransform::sample(image_size, 0.10, 0.10, rng).apply_all(boxes, image_size)
}
