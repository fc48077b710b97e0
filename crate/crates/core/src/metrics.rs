//! Box overlap, detection matching, sensitivity / false positives per slice,
//! and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::{BoundingBox, Corners};
use crate::error::{Error, Result};

/// Intersection over union of two boxes in pixel area.
pub fn iou<A: Corners, B: Corners>(a: &A, b: &B) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_prob: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Self {
        Self {
            bbox,
            confidence,
            class_prob: 1.0,
        }
    }
}

/// Indices of `dets` by descending confidence; equal confidences keep input
/// order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(detection index, ground-truth index)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Greedy one-to-one matching. Detections are visited by descending
/// confidence; each claims the still-free ground truth with the highest IoU
/// at or above `iou_threshold`, lowest index on ties.
pub fn match_detections(dets: &[Detection], gt: &[BoundingBox], iou_threshold: f64) -> Matching {
    let mut taken = vec![false; gt.len()];
    let mut m = Matching::default();
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, b);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                m.pairs.push((d, g));
            }
            None => m.unmatched_detections.push(d),
        }
    }
    m.unmatched_gt = (0..gt.len()).filter(|&g| !taken[g]).collect();
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub matched_gt: usize,
    pub total_gt: usize,
    pub unmatched_detections: usize,
    pub slices: usize,
}

impl Counts {
    pub fn sensitivity(&self) -> f64 {
        self.matched_gt as f64 / self.total_gt as f64
    }

    pub fn fps_per_slice(&self) -> f64 {
        self.unmatched_detections as f64 / self.slices as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sensitivity_50: f64,
    pub fps_per_slice_50: f64,
    pub sensitivity_25: f64,
    pub fps_per_slice_25: f64,
    pub counts_50: Counts,
    pub counts_25: Counts,
}

fn count_at(dets: &BTreeMap<String, Vec<Detection>>, gt: &BTreeMap<String, Vec<BoundingBox>>, thr: f64) -> Counts {
    let mut c = Counts {
        slices: gt.len(),
        ..Counts::default()
    };
    for (id, boxes) in gt {
        let d = dets.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_detections(d, boxes, thr);
        c.matched_gt += m.pairs.len();
        c.total_gt += boxes.len();
        c.unmatched_detections += m.unmatched_detections.len();
    }
    c
}

/// Scores detections against ground truth at IoU 0.5 and 0.25.
///
/// Every image must appear in `gt` (possibly with no boxes); images missing
/// from `dets` have no detections.
pub fn evaluate(dets: &BTreeMap<String, Vec<Detection>>, gt: &BTreeMap<String, Vec<BoundingBox>>) -> Result<EvalResult> {
    if let Some(extra) = dets.keys().find(|k| !gt.contains_key(*k)) {
        return Err(Error::InvalidConfig(format!("detections for unknown image {extra}")));
    }
    let c50 = count_at(dets, gt, 0.5);
    if c50.total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let c25 = count_at(dets, gt, 0.25);
    Ok(EvalResult {
        sensitivity_50: c50.sensitivity(),
        fps_per_slice_50: c50.fps_per_slice(),
        sensitivity_25: c25.sensitivity(),
        fps_per_slice_25: c25.fps_per_slice(),
        counts_50: c50,
        counts_25: c25,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub id: String,
    pub step: u64,
    pub result: EvalResult,
}

/// Fractions of the total step count bounding the selection window.
pub const SELECTION_WINDOW: (f64, f64) = (0.4, 1.0);

/// Best validation sensitivity at IoU 0.5 among checkpoints inside
/// `window`; ties go to fewer FPs per slice, then the earlier step.
pub fn select_model(evals: &[CheckpointEval], total_steps: u64, window: (f64, f64)) -> Result<&CheckpointEval> {
    let lo = window.0 * total_steps as f64;
    let hi = window.1 * total_steps as f64;
    evals
        .iter()
        .filter(|e| (e.step as f64) >= lo && (e.step as f64) <= hi)
        .min_by(|a, b| {
            b.result
                .sensitivity_50
                .total_cmp(&a.result.sensitivity_50)
                .then(a.result.fps_per_slice_50.total_cmp(&b.result.fps_per_slice_50))
                .then(a.step.cmp(&b.step))
        })
        .ok_or(Error::EmptyWindow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub setup: String,
    pub result: EvalResult,
}

pub const RESULTS_HEADER: &str = "setup,sensitivity_iou50,fps_per_slice_iou50,sensitivity_iou25,fps_per_slice_iou25";

impl ResultsRow {
    pub fn csv_line(&self) -> String {
        let r = &self.result;
        format!(
            "{},{:.2},{:.2},{:.2},{:.2}",
            self.setup, r.sensitivity_50, r.fps_per_slice_50, r.sensitivity_25, r.fps_per_slice_25
        )
    }
}

pub fn results_csv(rows: &[ResultsRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn write_results_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, results_csv(rows))?;
    Ok(())
}

/// One line per detection: `<image> <conf> <x_min,y_min,x_max,y_max>`.
pub fn format_detections(dets: &BTreeMap<String, Vec<Detection>>) -> String {
    let mut s = String::new();
    for (id, list) in dets {
        for d in list {
            let _ = writeln!(s, "{id} {:.6} {}", d.confidence, d.bbox);
        }
    }
    s
}

pub fn parse_detections(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, conf, b] = parts.as_slice() else {
            return Err(fail("expected <image> <conf> <box>"));
        };
        let confidence: f64 = conf.parse().map_err(|_| fail("bad confidence"))?;
        let bbox: BoundingBox = b.parse().map_err(|_| fail("bad box"))?;
        out.entry(id.to_string()).or_default().push(Detection::new(bbox, confidence));
    }
    Ok(out)
}
