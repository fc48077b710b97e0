use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Real,
    Synthetic,
    SyntheticNormal,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Real => "real",
            Category::Synthetic => "synthetic",
            Category::SyntheticNormal => "synthetic_normal",
        }
    }
}

/// Flattened images scaled to `[0, 1]`, one label per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingInput {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<Category>,
}

impl EmbeddingInput {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn extend(&mut self, other: EmbeddingInput) -> Result<()> {
        if !self.is_empty() && !other.is_empty() && self.dim != other.dim {
            return Err(Error::Shape(format!("cannot mix {}-d and {}-d vectors", self.dim, other.dim)));
        }
        if self.is_empty() {
            self.dim = other.dim;
        }
        self.vectors.extend(other.vectors);
        self.labels.extend(other.labels);
        Ok(())
    }

    /// Keeps at most `n` rows per category, in order.
    pub fn limit_per_category(&self, n: usize) -> Self {
        let mut counts = std::collections::BTreeMap::new();
        let mut out = Self {
            dim: self.dim,
            ..Self::default()
        };
        for (v, &l) in self.vectors.iter().zip(&self.labels) {
            let c = counts.entry(l).or_insert(0usize);
            if *c < n {
                *c += 1;
                out.vectors.push(v.clone());
                out.labels.push(l);
            }
        }
        out
    }
}

/// Area-average resampling of a rectangular region to `size x size`,
/// returned row-major in `[0, 1]`. Each output pixel is the coverage-weighted
/// mean of the source pixels under its footprint.
pub fn area_resize(image: &GrayImage, region: &BoundingBox, size: usize) -> Vec<f64> {
    let (x0, y0) = (region.x_min as f64, region.y_min as f64);
    let sx = region.width() as f64 / size as f64;
    let sy = region.height() as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    for v in 0..size {
        let (ya, yb) = (y0 + v as f64 * sy, y0 + (v + 1) as f64 * sy);
        for u in 0..size {
            let (xa, xb) = (x0 + u as f64 * sx, x0 + (u + 1) as f64 * sx);
            let mut acc = 0.0;
            let mut y = ya.floor() as i64;
            while (y as f64) < yb && y < image.height() as i64 {
                let wy = (yb.min(y as f64 + 1.0) - ya.max(y as f64)).max(0.0);
                let mut x = xa.floor() as i64;
                while (x as f64) < xb && x < image.width() as i64 {
                    let wx = (xb.min(x as f64 + 1.0) - xa.max(x as f64)).max(0.0);
                    acc += wx * wy * image.get_pixel(x as u32, y as u32)[0] as f64;
                    x += 1;
                }
                y += 1;
            }
            out[v * size + u] = acc / (sx * sy) / 255.0;
        }
    }
    out
}

/// One vector per box: the box region resampled to `crop_size`. Records
/// without boxes are skipped; the skip count is returned alongside.
pub fn extract_crops(records: &[ImageRecord], category: Category, crop_size: usize) -> Result<(EmbeddingInput, usize)> {
    if crop_size == 0 {
        return Err(Error::InvalidConfig("crop_size must be positive".into()));
    }
    let mut out = EmbeddingInput {
        dim: crop_size * crop_size,
        ..EmbeddingInput::default()
    };
    let mut skipped = 0;
    for r in records {
        if r.boxes.is_empty() {
            skipped += 1;
            continue;
        }
        let (w, h) = r.image.dimensions();
        for b in &r.boxes {
            b.check_within(w, h)?;
            out.vectors.push(area_resize(&r.image, b, crop_size));
            out.labels.push(category);
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} records without boxes");
    }
    Ok((out, skipped))
}

/// Whole images resampled to `size`, one vector per record.
pub fn extract_images(records: &[ImageRecord], category: Category, size: usize) -> EmbeddingInput {
    let vectors = records
        .iter()
        .map(|r| {
            let (w, h) = r.image.dimensions();
            let full = BoundingBox {
                x_min: 0,
                y_min: 0,
                x_max: w as i32,
                y_max: h as i32,
            };
            area_resize(&r.image, &full, size)
        })
        .collect::<Vec<_>>();
    EmbeddingInput {
        dim: size * size,
        labels: vec![category; vectors.len()],
        vectors,
    }
}

#[cfg(test)]
mod tests {
    use image::Luma;

    use super::*;
    use crate::dataset::Provenance;

    fn rec(image: GrayImage, boxes: Vec<BoundingBox>) -> ImageRecord {
        ImageRecord {
            id: "a.png".into(),
            image,
            boxes,
            subject_id: "s".into(),
            provenance: Provenance::Real,
        }
    }

    #[test]
    fn uniform_crop_is_constant() {
        let img = GrayImage::from_pixel(64, 64, Luma([51]));
        let (inp, skipped) = extract_crops(&[rec(img, vec![BoundingBox::new(3, 5, 20, 11).unwrap()])], Category::Real, 32).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(inp.dim, 1024);
        assert!(inp.vectors[0].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_mean_preserved() {
        let img = GrayImage::from_fn(64, 64, |x, y| Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
        let full = BoundingBox::new(0, 0, 64, 64).unwrap();
        let v = area_resize(&img, &full, 32);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.5).abs() <= 1.0 / 255.0);
        assert!(v.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let same = area_resize(&img, &full, 64);
        assert_eq!(same[1], 0.0);
        assert_eq!(same[0], 1.0);
    }

    #[test]
    fn records_without_boxes_skipped() {
        let img = GrayImage::new(32, 32);
        let (inp, skipped) = extract_crops(&[rec(img.clone(), vec![]), rec(img, vec![])], Category::Synthetic, 32).unwrap();
        assert!(inp.is_empty());
        assert_eq!(skipped, 2);
    }

    #[test]
    fn whole_images_and_limits() {
        let img = GrayImage::from_pixel(16, 16, Luma([255]));
        let recs = vec![rec(img.clone(), vec![]), rec(img, vec![])];
        let inp = extract_images(&recs, Category::SyntheticNormal, 8);
        assert_eq!(inp.len(), 2);
        assert!(inp.vectors[1].iter().all(|&v| v == 1.0));
        assert_eq!(inp.limit_per_category(1).len(), 1);
    }
}
