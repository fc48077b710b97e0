//! Procedural brain-like phantoms with bright elliptical lesions and
//! deliberately loose annotations.
//!
//! Each subject has a fixed head shape and low-frequency texture; its slices
//! vary the head scale and lesion layout. Lesions use a Gaussian intensity
//! profile truncated at the ellipse boundary, so the tight box of a lesion is
//! exactly the bounding box of its rendered support. The annotation stored on
//! the record is that tight box after [`jitter_box`].

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::{ImageRecord, Provenance};
use crate::error::{Error, Result};

/// Supported phantom edge lengths.
pub const IMAGE_SIZES: [u32; 4] = [32, 64, 128, 256];

/// Lesion profile width relative to the ellipse radius.
const PROFILE_SIGMA: f64 = 0.8;
const PARENCHYMA: f64 = 80.0;
const TEXTURE_AMPLITUDE: f64 = 12.0;
const PIXEL_NOISE: f64 = 3.0;
const VENTRICLE: f64 = 45.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: u32,
    pub subjects: usize,
    pub slices_per_subject: usize,
    /// Inclusive lesion count per slice; `[0, 0]` produces normal phantoms.
    pub tumor_count_range: [u32; 2],
    /// Inclusive lesion radius range in pixels.
    pub tumor_radius_range: [f64; 2],
    /// Peak lesion brightness above the parenchyma, in gray levels.
    pub tumor_intensity_boost: f64,
    pub texture_seed: u64,
    /// Maximum edge displacement of an annotation, as a fraction of the
    /// box side.
    pub annotation_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            subjects: 180,
            slices_per_subject: 16,
            tumor_count_range: [1, 3],
            tumor_radius_range: [6.0, 20.0],
            tumor_intensity_boost: 100.0,
            texture_seed: 0,
            annotation_jitter: 0.25,
        }
    }
}

impl PhantomSpec {
    /// Desk-scale corpus at 64x64 with proportionally smaller lesions.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            subjects: 180,
            slices_per_subject: 16,
            tumor_radius_range: [2.5, 6.0],
            ..Self::default()
        }
    }

    pub fn is_normal(&self) -> bool {
        self.tumor_count_range[1] == 0
    }

    /// Smallest semi-axis a head can take on any slice.
    pub fn head_radius(&self) -> f64 {
        0.40 * self.image_size as f64 * 0.85 * 0.9
    }

    pub fn validate(&self) -> Result<()> {
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(Error::BadResolution(self.image_size as i64));
        }
        let [lo, hi] = self.tumor_count_range;
        if lo > hi {
            return Err(Error::InvalidConfig(format!(
                "tumor_count_range {lo}..{hi} is inverted"
            )));
        }
        let [rmin, rmax] = self.tumor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidConfig(format!(
                "tumor_radius_range {rmin}..{rmax} is invalid"
            )));
        }
        if rmax >= self.head_radius() {
            return Err(Error::InvalidConfig(format!(
                "tumor radius {rmax} exceeds head radius {:.1}",
                self.head_radius()
            )));
        }
        if !(0.0..=0.5).contains(&self.annotation_jitter) {
            return Err(Error::InvalidConfig(format!(
                "annotation_jitter {} outside [0, 0.5]",
                self.annotation_jitter
            )));
        }
        if self.tumor_intensity_boost <= 0.0 {
            return Err(Error::InvalidConfig("tumor_intensity_boost must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadShape {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl HeadShape {
    fn norm2(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.norm2(x, y) < 1.0
    }
}

/// One lesion: a rotated ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tumor {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Tumor {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Self {
            cx,
            cy,
            rx: r,
            ry: r,
            angle: 0.0,
        }
    }

    /// Squared normalized radius of the pixel centre `(x, y)`.
    pub fn norm2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v
    }

    pub fn intensity(&self, x: f64, y: f64, boost: f64) -> f64 {
        let r2 = self.norm2(x, y);
        if r2 < 1.0 {
            boost * (-r2 / (2.0 * PROFILE_SIGMA * PROFILE_SIGMA)).exp()
        } else {
            0.0
        }
    }

    fn max_radius(&self) -> f64 {
        self.rx.max(self.ry)
    }

    /// Tight box of the rendered support, by enumerating pixel centres.
    pub fn tight_box(&self, size: u32) -> Option<BoundingBox> {
        let r = self.max_radius().ceil() as i32 + 1;
        let (cx, cy) = (self.cx.floor() as i32, self.cy.floor() as i32);
        let mut extent: Option<(i32, i32, i32, i32)> = None;
        for y in (cy - r).max(0)..(cy + r + 1).min(size as i32) {
            for x in (cx - r).max(0)..(cx + r + 1).min(size as i32) {
                if self.norm2(x as f64 + 0.5, y as f64 + 0.5) < 1.0 {
                    extent = Some(match extent {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        extent.map(|(a, b, c, d)| BoundingBox {
            x_min: a,
            y_min: b,
            x_max: c,
            y_max: d,
        })
    }
}

/// Smooth value noise over a coarse random lattice.
#[derive(Debug, Clone)]
pub struct Texture {
    grid: usize,
    values: Vec<f64>,
}

impl Texture {
    pub fn new(rng: &mut impl Rng) -> Self {
        let grid = 6;
        let values = (0..grid * grid).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { grid, values }
    }

    pub fn flat() -> Self {
        Self {
            grid: 2,
            values: vec![0.0; 4],
        }
    }

    /// Sample at normalized coordinates in `[0, 1]`.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let g = (self.grid - 1) as f64;
        let (fx, fy) = (u.clamp(0.0, 1.0) * g, v.clamp(0.0, 1.0) * g);
        let (ix, iy) = ((fx.floor() as usize).min(self.grid - 2), (fy.floor() as usize).min(self.grid - 2));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let at = |x: usize, y: usize| self.values[y * self.grid + x];
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Renders one slice and returns it with the tight box of every lesion.
///
/// `pixel_noise` supplies the per-pixel jitter; pass `None` for a noiseless
/// render.
pub fn render_slice(
    size: u32,
    head: &HeadShape,
    tumors: &[Tumor],
    texture: &Texture,
    boost: f64,
    mut pixel_noise: Option<&mut ChaCha8Rng>,
) -> (GrayImage, Vec<BoundingBox>) {
    let s = size as f64;
    // Two dark ventricles either side of the midline.
    let ventricles = [
        Tumor {
            cx: head.cx - 0.12 * head.ax,
            cy: head.cy - 0.05 * head.ay,
            rx: 0.07 * head.ax,
            ry: 0.22 * head.ay,
            angle: 0.25,
        },
        Tumor {
            cx: head.cx + 0.12 * head.ax,
            cy: head.cy - 0.05 * head.ay,
            rx: 0.07 * head.ax,
            ry: 0.22 * head.ay,
            angle: -0.25,
        },
    ];
    let mut img = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !head.contains(px, py) {
                continue;
            }
            let mut v = PARENCHYMA + TEXTURE_AMPLITUDE * texture.sample(px / s, py / s);
            if ventricles.iter().any(|t| t.norm2(px, py) < 1.0) {
                v = VENTRICLE;
            }
            // Slightly brighter cortical rim.
            let rim = head.norm2(px, py);
            if rim > 0.8 {
                v += 10.0 * (rim - 0.8) / 0.2;
            }
            for t in tumors {
                v += t.intensity(px, py, boost);
            }
            if let Some(rng) = pixel_noise.as_deref_mut() {
                v += rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE);
            }
            img.put_pixel(x, y, Luma([v.round().clamp(0.0, 255.0) as u8]));
        }
    }
    let boxes = tumors.iter().filter_map(|t| t.tight_box(size)).collect();
    (img, boxes)
}

/// Displaces every edge independently by up to `max_side_fraction` of the
/// box side, then clamps to `[0, image_size]`.
///
/// Minimum edges are floored and maximum edges ceiled, so with a fraction of
/// at most one half the result always contains the original centre.
pub fn jitter_box(
    b: &BoundingBox,
    max_side_fraction: f64,
    image_size: u32,
    rng: &mut impl Rng,
) -> BoundingBox {
    if max_side_fraction <= 0.0 {
        return *b;
    }
    let f = max_side_fraction.min(0.5);
    let (w, h) = (b.width() as f64, b.height() as f64);
    let mut d = |side: f64| rng.random_range(-f * side..=f * side);
    let x_min = (b.x_min as f64 + d(w)).floor() as i32;
    let x_max = (b.x_max as f64 + d(w)).ceil() as i32;
    let y_min = (b.y_min as f64 + d(h)).floor() as i32;
    let y_max = (b.y_max as f64 + d(h)).ceil() as i32;
    let size = image_size as i32;
    let x_min = x_min.clamp(0, size - 1);
    let y_min = y_min.clamp(0, size - 1);
    BoundingBox {
        x_min,
        y_min,
        x_max: x_max.clamp(x_min + 1, size),
        y_max: y_max.clamp(y_min + 1, size),
    }
}

fn subject_seed(seed: u64, subject_id: &str) -> u64 {
    // FNV-1a over the identifier.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in subject_id.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Generates every slice of one subject.
pub fn generate_phantom(spec: &PhantomSpec, subject_id: &str, seed: u64) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let size = spec.image_size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(seed, subject_id));
    let mut texture_rng = ChaCha8Rng::seed_from_u64(subject_seed(spec.texture_seed, subject_id));
    let texture = Texture::new(&mut texture_rng);
    let base_ax = 0.40 * s * rng.random_range(0.9..1.0);
    let base_ay = 0.46 * s * rng.random_range(0.9..1.0);
    let provenance = if spec.is_normal() {
        Provenance::Normal
    } else {
        Provenance::Real
    };

    let n = spec.slices_per_subject;
    let mut records = Vec::with_capacity(n);
    for k in 0..n {
        let scale = 0.85 + 0.15 * (std::f64::consts::PI * (k + 1) as f64 / (n + 1) as f64).sin();
        let head = HeadShape {
            cx: s / 2.0 + rng.random_range(-0.02..0.02) * s,
            cy: s / 2.0 + rng.random_range(-0.02..0.02) * s,
            ax: base_ax * scale,
            ay: base_ay * scale,
        };
        let count = rng.random_range(spec.tumor_count_range[0]..=spec.tumor_count_range[1]);
        let tumors = place_tumors(spec, &head, count as usize, &mut rng);
        let (image, tight) = render_slice(size, &head, &tumors, &texture, spec.tumor_intensity_boost, Some(&mut rng));
        let boxes = tight
            .iter()
            .map(|b| jitter_box(b, spec.annotation_jitter, size, &mut rng))
            .collect();
        records.push(ImageRecord {
            id: format!("images/{subject_id}/slice{k:02}.png"),
            image,
            boxes,
            subject_id: subject_id.to_string(),
            provenance,
        });
    }
    Ok(records)
}

/// Rejection-samples non-overlapping lesions well inside the head. May
/// return fewer than `count` when the head is crowded.
fn place_tumors(spec: &PhantomSpec, head: &HeadShape, count: usize, rng: &mut ChaCha8Rng) -> Vec<Tumor> {
    let [rmin, rmax] = spec.tumor_radius_range;
    let mut tumors: Vec<Tumor> = Vec::with_capacity(count);
    let mut attempts = 0;
    while tumors.len() < count && attempts < 200 {
        attempts += 1;
        let rx = rng.random_range(rmin..=rmax);
        let ry = (rx * rng.random_range(0.8..1.25)).clamp(rmin, rmax);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let reach = rx.max(ry) + 1.0;
        let (ix, iy) = (head.ax - reach, head.ay - reach);
        if ix <= 0.0 || iy <= 0.0 {
            continue;
        }
        let (u, v): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if u * u + v * v >= 1.0 {
            continue;
        }
        let t = Tumor {
            cx: head.cx + u * ix,
            cy: head.cy + v * iy,
            rx,
            ry,
            angle,
        };
        // Keep the annulus around each lesion free of its neighbours.
        let clear = tumors.iter().all(|o| {
            let d = ((o.cx - t.cx).powi(2) + (o.cy - t.cy).powi(2)).sqrt();
            d > 1.6 * (o.max_radius() + t.max_radius())
        });
        if clear {
            tumors.push(t);
        }
    }
    tumors
}

/// Generates the whole corpus: subjects `s000..` (or `n000..` for a normal
/// spec).
pub fn generate_corpus(spec: &PhantomSpec, seed: u64) -> Result<Vec<ImageRecord>> {
    let prefix = if spec.is_normal() { "n" } else { "s" };
    let mut out = Vec::with_capacity(spec.subjects * spec.slices_per_subject);
    for i in 0..spec.subjects {
        out.extend(generate_phantom(spec, &format!("{prefix}{i:03}"), seed)?);
    }
    Ok(out)
}

/// Mean inside each lesion support minus mean over the ring
/// `1 <= r < 1.5` (normalized radius) around it.
pub fn lesion_contrast(image: &GrayImage, t: &Tumor) -> f64 {
    let (w, h) = image.dimensions();
    let r = (1.5 * t.max_radius()).ceil() as i32 + 1;
    let (mut inner, mut n_inner, mut ring, mut n_ring) = (0.0, 0usize, 0.0, 0usize);
    for y in (t.cy as i32 - r).max(0)..(t.cy as i32 + r + 1).min(h as i32) {
        for x in (t.cx as i32 - r).max(0)..(t.cx as i32 + r + 1).min(w as i32) {
            let r2 = t.norm2(x as f64 + 0.5, y as f64 + 0.5);
            let v = image.get_pixel(x as u32, y as u32)[0] as f64;
            if r2 < 1.0 {
                inner += v;
                n_inner += 1;
            } else if r2 < 2.25 {
                ring += v;
                n_ring += 1;
            }
        }
    }
    inner / n_inner.max(1) as f64 - ring / n_ring.max(1) as f64
}
