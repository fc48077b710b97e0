//! Axis-aligned boxes.
//!
//! Coordinates are `(x_min, y_min, x_max, y_max)` with the origin at the
//! top-left corner and half-open intervals, so a box covers the pixels
//! `x_min..x_max` by `y_min..y_max`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BoundingBox {
    /// Builds a box, rejecting empty or inverted extents.
    pub fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidConfig(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.is_valid()
            && self.x_min >= 0
            && self.y_min >= 0
            && self.x_max <= width as i32
            && self.y_max <= height as i32
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.within(width, height) {
            Ok(())
        } else {
            Err(Error::BoxOutOfBounds {
                bbox: *self,
                width,
                height,
            })
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min as f64 && x <= self.x_max as f64 && y >= self.y_min as f64 && y <= self.y_max as f64
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamped(&self, width: u32, height: u32) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.clamp(0, width as i32),
            y_min: self.y_min.clamp(0, height as i32),
            x_max: self.x_max.clamp(0, width as i32),
            y_max: self.y_max.clamp(0, height as i32),
        };
        b.is_valid().then_some(b)
    }

    pub fn to_f64(&self) -> BoxF {
        BoxF {
            x_min: self.x_min as f64,
            y_min: self.y_min as f64,
            x_max: self.x_max as f64,
            y_max: self.y_max as f64,
        }
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i32> = s
            .split(',')
            .map(|p| p.trim().parse::<i32>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("bad box {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c, d] => BoundingBox::new(a, b, c, d),
            _ => Err(Error::InvalidConfig(format!("bad box {s:?}: need 4 values"))),
        }
    }
}

/// Real-valued box used for decoded detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxF {
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Nearest integer box, or `None` when rounding collapses it.
    pub fn round(&self) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.round() as i32,
            y_min: self.y_min.round() as i32,
            x_max: self.x_max.round() as i32,
            y_max: self.y_max.round() as i32,
        };
        b.is_valid().then_some(b)
    }
}

/// Anything with real-valued corners; lets [`crate::metrics::iou`] mix
/// annotations and detections.
pub trait Corners {
    fn corners(&self) -> [f64; 4];
}

impl Corners for BoundingBox {
    fn corners(&self) -> [f64; 4] {
        [
            self.x_min as f64,
            self.y_min as f64,
            self.x_max as f64,
            self.y_max as f64,
        ]
    }
}

impl Corners for BoxF {
    fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}
