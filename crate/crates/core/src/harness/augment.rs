use image::{GrayImage, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::mask::AnnotationTransform;

/// Geometric and intensity jitter applied to detector training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicAugConfig {
    pub flip_prob: f64,
    /// Maximum translation as a fraction of the image side, rounded to
    /// whole pixels.
    pub max_shift: f64,
    pub max_zoom: f64,
    /// Maximum brightness offset in gray levels.
    pub brightness: f64,
    /// Maximum relative contrast change about mid-gray.
    pub contrast: f64,
}

impl Default for ClassicAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift: 0.1,
            max_zoom: 0.1,
            brightness: 10.0,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicDraw {
    pub transform: AnnotationTransform,
    pub brightness: f64,
    pub contrast: f64,
}

impl ClassicDraw {
    pub const IDENTITY: Self = Self {
        transform: AnnotationTransform::IDENTITY,
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn sample(cfg: &ClassicAugConfig, image_size: u32, rng: &mut impl Rng) -> Self {
        let s = image_size as f64;
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift_x = sym(cfg.max_shift * s).round();
        let shift_y = sym(cfg.max_shift * s).round();
        let zoom = 1.0 + sym(cfg.max_zoom);
        let brightness = sym(cfg.brightness);
        let contrast = 1.0 + sym(cfg.contrast);
        Self {
            transform: AnnotationTransform {
                flip_horizontal: rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)),
                flip_vertical: false,
                shift_x,
                shift_y,
                zoom,
            },
            brightness,
            contrast,
        }
    }

    /// Warps the image by the inverse transform (bilinear, black outside)
    /// and maps the boxes forward. Boxes pushed out of the image are
    /// dropped.
    pub fn apply(&self, record: &ImageRecord) -> ImageRecord {
        let (w, h) = record.image.dimensions();
        let t = &self.transform;
        let inv = |u: f64, size: f64, flip: bool, shift: f64| {
            let c = size / 2.0;
            let v = (u - shift - c) / t.zoom + c;
            if flip {
                size - v
            } else {
                v
            }
        };
        let src = &record.image;
        let sample = |x: f64, y: f64| -> f64 {
            let x = x - 0.5;
            let y = y - 0.5;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let px = |xi: f64, yi: f64| -> f64 {
                if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                    0.0
                } else {
                    src.get_pixel(xi as u32, yi as u32)[0] as f64
                }
            };
            let mut v = px(x0, y0) * (1.0 - fx) * (1.0 - fy);
            if fx > 0.0 {
                v += px(x0 + 1.0, y0) * fx * (1.0 - fy);
            }
            if fy > 0.0 {
                v += px(x0, y0 + 1.0) * (1.0 - fx) * fy;
            }
            if fx > 0.0 && fy > 0.0 {
                v += px(x0 + 1.0, y0 + 1.0) * fx * fy;
            }
            v
        };
        let image = GrayImage::from_fn(w, h, |u, v| {
            let sx = inv(u as f64 + 0.5, w as f64, t.flip_horizontal, t.shift_x);
            let sy = inv(v as f64 + 0.5, h as f64, t.flip_vertical, t.shift_y);
            let val = (sample(sx, sy) - 128.0) * self.contrast + 128.0 + self.brightness;
            Luma([val.round().clamp(0.0, 255.0) as u8])
        });
        ImageRecord {
            image,
            boxes: t.apply_all(&record.boxes, w),
            ..record.clone()
        }
    }
}

/// Draws a random classic augmentation and applies it to `record`.
pub fn classic_augment(record: &ImageRecord, cfg: &ClassicAugConfig, rng: &mut impl Rng) -> ImageRecord {
    ClassicDraw::sample(cfg, record.image.width(), rng).apply(record)
}
