use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::anchors::{compute_anchors, AnchorSet};
use super::grid::{activate, decode_predictions, detection_loss, encode_targets, DetLossConfig};
use super::net::{BackboneConfig, DetectorNet, STRIDE};
use crate::bbox::BoundingBox;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::gan::images_to_tensor;
use crate::harness::{classic_augment, ClassicAugConfig};
use crate::metrics::{evaluate, select_model, CheckpointEval, Detection, SELECTION_WINDOW};
use crate::nn::{self, Adam, AdamConfig, CheckpointHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub train_res: i64,
    pub eval_res: i64,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub num_anchors: usize,
    /// Fixed anchors; computed from the training boxes when `None`.
    pub anchors: Option<AnchorSet>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Validation interval in steps; zero validates only at the end.
    pub eval_every: u64,
    pub selection_window: (f64, f64),
    pub classic_da: bool,
    pub augment: ClassicAugConfig,
    pub backbone: BackboneConfig,
    pub loss: DetLossConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            train_res: 128,
            eval_res: 192,
            batch_size: 16,
            lr: 1e-3,
            steps: 3000,
            num_anchors: 6,
            anchors: None,
            conf_threshold: 0.001,
            nms_iou: 0.45,
            eval_every: 250,
            selection_window: SELECTION_WINDOW,
            classic_da: true,
            augment: ClassicAugConfig::default(),
            backbone: BackboneConfig::default(),
            loss: DetLossConfig::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Settings sized for the 64x64 desk corpus on a CPU: the network sees
    /// native resolution in training and a 1.5x upsampled image at test.
    pub fn desk() -> Self {
        Self {
            train_res: 64,
            eval_res: 96,
            steps: 2000,
            eval_every: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.train_res, self.eval_res] {
            if r < STRIDE || r % STRIDE != 0 {
                return Err(Error::InvalidConfig(format!("network resolution {r} must be a positive multiple of {STRIDE}")));
            }
        }
        if self.batch_size == 0 || self.num_anchors == 0 {
            return Err(Error::InvalidConfig("batch_size and num_anchors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidConfig("nms_iou must lie in [0, 1]".into()));
        }
        self.loss.validate()
    }
}

/// Resizes a `[N,1,H,W]` batch to `res x res`.
fn resize(x: &Tensor, res: i64) -> Tensor {
    if x.size()[2] == res {
        x.shallow_clone()
    } else {
        x.upsample_bilinear2d([res, res], false, None::<f64>, None::<f64>)
    }
}

fn image_size(records: &[ImageRecord]) -> Result<u32> {
    let first = records.first().ok_or(Error::EmptyDataset("no detector training records"))?;
    let size = first.image.width();
    for r in records {
        if r.image.dimensions() != (size, size) {
            return Err(Error::Shape(format!("record {} is not {size}x{size}", r.id)));
        }
    }
    Ok(size)
}

impl DetectorNet {
    /// Detections for each image, run at network resolution `res`.
    pub fn detect(&self, images: &[&GrayImage], res: i64, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let size = chunk[0].width();
            let x = resize(&images_to_tensor(chunk, Kind::Float)?, res);
            let raw = tch::no_grad(|| self.forward(&x, false))?;
            out.extend(decode_predictions(&raw, self.anchors(), self.loss_config().num_classes, size, conf_threshold, nms_iou)?);
        }
        Ok(out)
    }

    /// Detections keyed by record id.
    pub fn detect_records(&self, records: &[ImageRecord], res: i64, conf_threshold: f64, nms_iou: f64) -> Result<BTreeMap<String, Vec<Detection>>> {
        let images: Vec<&GrayImage> = records.iter().map(|r| &r.image).collect();
        let dets = self.detect(&images, res, conf_threshold, nms_iou)?;
        Ok(records.iter().map(|r| r.id.clone()).zip(dets).collect())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store().named("detector")
    }
}

pub fn ground_truth(records: &[ImageRecord]) -> BTreeMap<String, Vec<BoundingBox>> {
    records.iter().map(|r| (r.id.clone(), r.boxes.clone())).collect()
}

pub struct TrainedDetector {
    /// Weights of the selected checkpoint.
    pub net: DetectorNet,
    pub header: CheckpointHeader,
    /// Mean per-image loss at every step.
    pub history: Vec<f64>,
    pub evals: Vec<CheckpointEval>,
    pub selected: CheckpointEval,
    /// Every record id drawn into a training batch.
    pub batch_ids: BTreeSet<String>,
}

impl TrainedDetector {
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, &self.header, &self.net.named_tensors())
    }
}

/// Rebuilds a detector from a checkpoint written by [`train_detector`].
pub fn load_detector(path: &Path) -> Result<(DetectorNet, DetectorConfig)> {
    let (header, tensors) = nn::load_checkpoint(path, "detector", None)?;
    let cfg: DetectorConfig = serde_json::from_value(header.config.clone())?;
    let anchors = cfg.anchors.clone().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "anchors missing from header".into(),
    })?;
    let mut net = DetectorNet::new(cfg.backbone, anchors, cfg.loss, 0)?;
    net.store_mut().load("detector", &tensors)?;
    Ok((net, cfg))
}

fn batch_loss(net: &DetectorNet, batch: &[ImageRecord], res: i64) -> Result<Tensor> {
    let size = batch[0].image.width();
    let images: Vec<&GrayImage> = batch.iter().map(|r| &r.image).collect();
    let x = resize(&images_to_tensor(&images, Kind::Float)?, res);
    let raw = net.forward(&x, true)?;
    let pred = activate(&raw, net.anchors(), net.loss_config().num_classes)?;
    let grid = (res / STRIDE) as usize;
    let (targets, masks): (Vec<Tensor>, Vec<Tensor>) = batch
        .iter()
        .map(|r| encode_targets(&r.boxes, grid, size, net.anchors(), net.loss_config().num_classes).to_tensors(Kind::Float))
        .unzip();
    let loss = detection_loss(&pred, &Tensor::stack(&targets, 0), &Tensor::stack(&masks, 0), net.loss_config())?;
    Ok(loss / batch.len() as f64)
}

/// Trains a detector on `train` and selects the checkpoint with the best
/// validation sensitivity inside the configured step window.
///
/// Anchors come from `train` boxes unless fixed in the config. When
/// `out_dir` is given, every validated checkpoint and the selected one are
/// written there.
pub fn train_detector(config: &DetectorConfig, train: &[ImageRecord], val: &[ImageRecord], out_dir: Option<&Path>) -> Result<TrainedDetector> {
    config.validate()?;
    let size = image_size(train)?;
    if val.is_empty() {
        return Err(Error::EmptyDataset("no validation records for model selection"));
    }
    let anchors = match &config.anchors {
        Some(a) => a.clone(),
        None => {
            let boxes: Vec<BoundingBox> = train.iter().flat_map(|r| r.boxes.iter().copied()).collect();
            compute_anchors(&boxes, config.num_anchors, config.seed)?
        }
    };
    let mut effective = config.clone();
    effective.anchors = Some(anchors.clone());
    let net = DetectorNet::new(config.backbone, anchors, config.loss, config.seed)?;
    let mut opt = Adam::new(
        net.store().trainable(),
        AdamConfig {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_de7e);
    let val_gt = ground_truth(val);
    let mut header = CheckpointHeader {
        format_version: nn::CHECKPOINT_VERSION,
        kind: "detector".into(),
        config_hash: nn::config_hash(&effective),
        config: serde_json::to_value(&effective)?,
        stage: 0,
        alpha: 1.0,
        step: 0,
        train_subjects: train.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
        extra: serde_json::Value::Null,
    };

    let mut history = Vec::with_capacity(config.steps as usize);
    let mut evals = Vec::new();
    let mut batch_ids = BTreeSet::new();
    let mut best: Option<(CheckpointEval, Vec<(String, Tensor)>)> = None;
    let lo = config.selection_window.0 * config.steps as f64;
    let hi = config.selection_window.1 * config.steps as f64;

    let mut validate = |net: &DetectorNet, step: u64, header: &mut CheckpointHeader, evals: &mut Vec<CheckpointEval>| -> Result<()> {
        let dets = net.detect_records(val, config.eval_res, config.conf_threshold, config.nms_iou)?;
        let e = CheckpointEval {
            id: format!("step{step:07}"),
            step,
            result: evaluate(&dets, &val_gt)?,
        };
        log::info!("step {step} val sensitivity@0.5 {:.3} fps {:.2}", e.result.sensitivity_50, e.result.fps_per_slice_50);
        header.step = step;
        if let Some(dir) = out_dir {
            nn::save_checkpoint(&dir.join(format!("detector-{step:07}.ckpt")), header, &net.named_tensors())?;
        }
        let in_window = (step as f64) >= lo && (step as f64) <= hi;
        if in_window {
            let candidates = match &best {
                Some((b, _)) => vec![b.clone(), e.clone()],
                None => vec![e.clone()],
            };
            let chosen = select_model(&candidates, config.steps, config.selection_window)?;
            if best.as_ref().is_none_or(|(b, _)| b.id != chosen.id) {
                best = Some((e.clone(), net.store().snapshot("detector")));
            }
        }
        evals.push(e);
        Ok(())
    };

    if config.steps == 0 {
        validate(&net, 0, &mut header, &mut evals)?;
    }
    for step in 1..=config.steps {
        let batch: Vec<ImageRecord> = (0..config.batch_size)
            .map(|_| {
                let r = &train[rng.random_range(0..train.len())];
                batch_ids.insert(r.id.clone());
                if config.classic_da {
                    classic_augment(r, &config.augment, &mut rng)
                } else {
                    r.clone()
                }
            })
            .collect();
        let loss = batch_loss(&net, &batch, config.train_res)?;
        opt.zero_grad();
        loss.backward();
        opt.step();
        history.push(loss.double_value(&[]));
        let due = config.eval_every > 0 && step % config.eval_every == 0;
        if due || step == config.steps {
            validate(&net, step, &mut header, &mut evals)?;
        }
    }

    let (selected, weights) = best.ok_or(Error::EmptyWindow)?;
    let mut net = net;
    net.store_mut().load("detector", &weights)?;
    header.step = selected.step;
    header.extra = serde_json::json!({ "selected": selected.id, "image_size": size });
    let trained = TrainedDetector {
        net,
        header,
        history,
        evals,
        selected,
        batch_ids,
    };
    if let Some(dir) = out_dir {
        trained.save(&dir.join("detector-selected.ckpt"))?;
    }
    Ok(trained)
}
