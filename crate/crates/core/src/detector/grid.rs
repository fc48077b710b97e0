//! Grid targets, the sum-squared detection loss, and decoding.
//!
//! Entries are laid out `[gy, gx, anchor, field]` with fields
//! `x, y, w, h, C, p(c)...`: `x, y` are centroid offsets inside the cell in
//! `[0, 1]`, `w, h` box sizes in image pixels, `C` objectness.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::anchors::{shape_iou, AnchorSet};
use crate::bbox::{BoundingBox, BoxF};
use crate::error::{Error, Result};
use crate::metrics::{confidence_order, iou, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetLossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub num_classes: usize,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            num_classes: 1,
        }
    }
}

impl DetLossConfig {
    pub fn fields(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_coord > 0.0 && self.lambda_noobj > 0.0) || self.num_classes == 0 {
            return Err(Error::InvalidConfig("loss weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTarget {
    pub grid: usize,
    pub anchors: usize,
    pub fields: usize,
    pub values: Vec<f64>,
    /// Responsibility indicator per `(gy, gx, anchor)`.
    pub responsible: Vec<bool>,
}

impl GridTarget {
    pub fn empty(grid: usize, anchors: usize, fields: usize) -> Self {
        Self {
            grid,
            anchors,
            fields,
            values: vec![0.0; grid * grid * anchors * fields],
            responsible: vec![false; grid * grid * anchors],
        }
    }

    pub fn slot(&self, gy: usize, gx: usize, a: usize) -> usize {
        (gy * self.grid + gx) * self.anchors + a
    }

    pub fn entry(&self, gy: usize, gx: usize, a: usize) -> &[f64] {
        let s = self.slot(gy, gx, a) * self.fields;
        &self.values[s..s + self.fields]
    }

    pub fn responsible_count(&self) -> usize {
        self.responsible.iter().filter(|&&r| r).count()
    }

    /// `([S,S,B,K], [S,S,B])` tensors.
    pub fn to_tensors(&self, kind: Kind) -> (Tensor, Tensor) {
        let (s, b, k) = (self.grid as i64, self.anchors as i64, self.fields as i64);
        let v = Tensor::from_slice(&self.values).view([s, s, b, k]).to_kind(kind);
        let m: Vec<f64> = self.responsible.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        (v, Tensor::from_slice(&m).view([s, s, b]).to_kind(kind))
    }
}

/// Assigns each box to the cell holding its centroid and its best-matching
/// anchor (lowest index on ties). A box whose slot is already taken moves to
/// its next-best anchor in the same cell; if every anchor there is taken it
/// is dropped.
pub fn encode_targets(boxes: &[BoundingBox], grid: usize, image_size: u32, anchors: &AnchorSet, num_classes: usize) -> GridTarget {
    let fields = 5 + num_classes;
    let mut t = GridTarget::empty(grid, anchors.len(), fields);
    let cell = image_size as f64 / grid as f64;
    for b in boxes {
        let (cx, cy) = b.center();
        let gx = ((cx / cell).floor() as usize).min(grid - 1);
        let gy = ((cy / cell).floor() as usize).min(grid - 1);
        let (w, h) = (b.width() as f64, b.height() as f64);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&i, &j| shape_iou((w, h), anchors.anchors[j]).total_cmp(&shape_iou((w, h), anchors.anchors[i])));
        let Some(a) = order.into_iter().find(|&a| !t.responsible[t.slot(gy, gx, a)]) else {
            log::warn!("no free anchor for box {b} in cell ({gx}, {gy}); dropped");
            continue;
        };
        let slot = t.slot(gy, gx, a);
        t.responsible[slot] = true;
        let e = &mut t.values[slot * fields..(slot + 1) * fields];
        e[0] = cx / cell - gx as f64;
        e[1] = cy / cell - gy as f64;
        e[2] = w;
        e[3] = h;
        e[4] = 1.0;
        for p in &mut e[5..] {
            *p = 1.0;
        }
    }
    t
}

/// The five-term sum-squared error over a batch.
///
/// `pred` and `target` are `[N,S,S,B,K]` in the target layout; `responsible`
/// is `[N,S,S,B]`. Negative predicted sizes are clamped to zero before the
/// square roots.
pub fn detection_loss(pred: &Tensor, target: &Tensor, responsible: &Tensor, cfg: &DetLossConfig) -> Result<Tensor> {
    cfg.validate()?;
    let ps = pred.size();
    if ps != target.size() || ps[..ps.len() - 1] != responsible.size()[..] || ps.last() != Some(&(cfg.fields() as i64)) {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?} and mask {:?} disagree",
            ps,
            target.size(),
            responsible.size()
        )));
    }
    let kind = pred.kind();
    let obj = responsible.to_kind(kind);
    let noobj = 1.0 - &obj;
    let f = |t: &Tensor, i: i64| t.select(-1, i);
    let sq = |a: &Tensor, b: &Tensor| (a - b).square();

    let xy = (sq(&f(pred, 0), &f(target, 0)) + sq(&f(pred, 1), &f(target, 1))) * &obj;

    let pw = f(pred, 2);
    let ph = f(pred, 3);
    let on = obj.gt(0.5);
    let neg = (pw.lt(0.0).logical_or(&ph.lt(0.0))).logical_and(&on);
    if neg.any().int64_value(&[]) != 0 {
        log::warn!("negative predicted box size clamped to zero");
    }
    let ones = Tensor::ones_like(&pw);
    let root = |t: &Tensor| t.clamp_min(0.0).where_self(&on, &ones).sqrt();
    let wh = (sq(&root(&pw), &root(&f(target, 2))) + sq(&root(&ph), &root(&f(target, 3)))) * &obj;

    let conf = sq(&f(pred, 4), &f(target, 4));
    let cls = sq(&pred.narrow(-1, 5, cfg.num_classes as i64), &target.narrow(-1, 5, cfg.num_classes as i64))
        .sum_dim_intlist([-1i64].as_slice(), false, kind)
        * &obj;

    Ok((xy.sum(kind) + wh.sum(kind)) * cfg.lambda_coord
        + (&conf * &obj).sum(kind)
        + (&conf * &noobj).sum(kind) * cfg.lambda_noobj
        + cls.sum(kind))
}

/// Maps raw head output `[N, B*K, S, S]` to the target layout
/// `[N,S,S,B,K]`: sigmoid offsets, `anchor * exp` sizes in pixels, sigmoid
/// objectness and class probabilities.
pub fn activate(raw: &Tensor, anchors: &AnchorSet, num_classes: usize) -> Result<Tensor> {
    let s = raw.size();
    let k = 5 + num_classes as i64;
    let b = anchors.len() as i64;
    if s.len() != 4 || s[1] != b * k || s[2] != s[3] {
        return Err(Error::Shape(format!("raw output {s:?} does not fit {b} anchors x {k} fields")));
    }
    let kind = raw.kind();
    let t = raw.view([s[0], b, k, s[2], s[3]]).permute([0, 3, 4, 1, 2]);
    let aw: Vec<f64> = anchors.anchors.iter().map(|a| a.0).collect();
    let ah: Vec<f64> = anchors.anchors.iter().map(|a| a.1).collect();
    let aw = Tensor::from_slice(&aw).to_kind(kind);
    let ah = Tensor::from_slice(&ah).to_kind(kind);
    let xy = t.narrow(-1, 0, 2).sigmoid();
    let w = (t.select(-1, 2).exp() * aw).unsqueeze(-1);
    let h = (t.select(-1, 3).exp() * ah).unsqueeze(-1);
    let rest = t.narrow(-1, 4, k - 4).sigmoid();
    Ok(Tensor::cat(&[xy, w, h, rest], -1))
}

/// Greedy suppression: keeps detections by descending confidence, dropping
/// any whose IoU with a kept one exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in confidence_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Detections from one image's activated grid `[S,S,B,K]` (values as
/// `f64`, row-major in the target layout).
pub fn decode_grid(
    values: &[f64],
    grid: usize,
    anchors: usize,
    fields: usize,
    image_size: u32,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let cell = image_size as f64 / grid as f64;
    let mut dets = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            for a in 0..anchors {
                let s = ((gy * grid + gx) * anchors + a) * fields;
                let e = &values[s..s + fields];
                let class_prob = e[5..].iter().cloned().fold(0.0, f64::max);
                let confidence = e[4] * class_prob;
                if !(confidence >= conf_threshold) || confidence <= 0.0 {
                    continue;
                }
                let b = BoxF::from_center((gx as f64 + e[0]) * cell, (gy as f64 + e[1]) * cell, e[2], e[3]);
                let Some(bbox) = b.round().and_then(|b| b.clamped(image_size, image_size)) else {
                    continue;
                };
                dets.push(Detection {
                    bbox,
                    confidence,
                    class_prob,
                });
            }
        }
    }
    nms(&dets, nms_iou)
}

/// Decodes raw head output `[N, B*K, S, S]` into per-image detections.
pub fn decode_predictions(
    raw: &Tensor,
    anchors: &AnchorSet,
    num_classes: usize,
    image_size: u32,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let act = activate(&raw.detach(), anchors, num_classes)?.to_kind(Kind::Double).contiguous();
    let s = act.size();
    let (n, grid) = (s[0] as usize, s[1] as usize);
    let fields = 5 + num_classes;
    let flat = Vec::<f64>::try_from(act.view([-1]))?;
    let per = grid * grid * anchors.len() * fields;
    Ok((0..n)
        .map(|i| decode_grid(&flat[i * per..(i + 1) * per], grid, anchors.len(), fields, image_size, conf_threshold, nms_iou))
        .collect())
}
