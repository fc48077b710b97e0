use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Prior box sizes `(width, height)` in image pixels, sorted by area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.is_empty() || anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::InvalidConfig("anchors must be non-empty and positive".into()));
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            anchors: self.anchors.iter().map(|&(w, h)| (w * factor, h * factor)).collect(),
        }
    }
}

/// IoU of two boxes sharing a centre.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - shape_iou(a, b)
}

const RESTARTS: usize = 8;
const MAX_ITERS: usize = 300;

fn nearest(p: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centers.iter().enumerate() {
        let d = distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding under the `1 - IoU` distance.
fn seed_centers(points: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|&p| nearest(p, &centers).1.powi(2)).collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &v) in d.iter().enumerate() {
                if v > 0.0 && r < v {
                    idx = i;
                    break;
                }
                r -= v;
            }
            idx
        };
        centers.push(points[pick]);
    }
    centers
}

fn lloyd(points: &[(f64, f64)], mut centers: Vec<(f64, f64)>) -> (Vec<(f64, f64)>, f64) {
    let k = centers.len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let c = nearest(p, &centers).0;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, &p) in points.iter().enumerate() {
            let s = &mut sums[assign[i]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    let cost = points.iter().map(|&p| nearest(p, &centers).1).sum();
    (centers, cost)
}

/// Clusters box shapes into `k` anchors with the `1 - IoU` distance.
/// Deterministic for a given `seed`; the best of several seeded restarts
/// is kept.
pub fn compute_anchors(boxes: &[BoundingBox], k: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if boxes.len() < k {
        return Err(Error::TooFewBoxes {
            needed: k,
            got: boxes.len(),
        });
    }
    let points: Vec<(f64, f64)> = boxes.iter().map(|b| (b.width() as f64, b.height() as f64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<(f64, f64)>, f64)> = None;
    for _ in 0..RESTARTS {
        let (centers, cost) = lloyd(&points, seed_centers(&points, k, &mut rng));
        if best.as_ref().is_none_or(|b| cost < b.1) {
            best = Some((centers, cost));
        }
    }
    let mut anchors = best.expect("at least one restart").0;
    anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    AnchorSet::new(anchors)
}
