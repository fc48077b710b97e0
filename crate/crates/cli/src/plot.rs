use cpggan::embed::Category;
use image::{Rgb, RgbImage};

pub fn color(c: Category) -> [u8; 3] {
    match c {
        Category::Real => [31, 119, 180],
        Category::Synthetic => [214, 39, 40],
        Category::SyntheticNormal => [44, 160, 44],
    }
}

/// Square scatter plot on white, one filled disc per point.
pub fn scatter(points: &[[f64; 2]], labels: &[Category], side: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    if points.is_empty() {
        return img;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let margin = 12.0;
    let scale = (side as f64 - 2.0 * margin) / span;
    let radius = 3i64;
    for (p, &l) in points.iter().zip(labels) {
        let cx = (margin + (p[0] - lo[0]) * scale).round() as i64;
        let cy = (side as f64 - margin - (p[1] - lo[1]) * scale).round() as i64;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= radius * radius && x >= 0 && y >= 0 && x < side as i64 && y < side as i64 {
                    img.put_pixel(x as u32, y as u32, Rgb(color(l)));
                }
            }
        }
    }
    img
}
