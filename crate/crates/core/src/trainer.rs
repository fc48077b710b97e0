//! GAN training loop and the synthetic-image sampler.
//!
//! Steps count critic updates. A generator update follows every
//! `critic_steps_per_gen_step` critic updates. On every
//! `label_flip_period`-th critic step the real and generated batches swap
//! roles in the critic loss (the gradient penalty is symmetric and stays as
//! is).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::bbox::BoundingBox;
use crate::dataset::{ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::gan::{
    critic_loss, downsample2, generator_loss, gradient_penalty, images_to_tensor, masks_to_tensor, sample_epsilon,
    tensor_to_images, upsample2, ConditionalGan, Cpggan, GanConfig, GanLossConfig, ProgressiveSchedule, StagePos,
};
use crate::mask::{augment_annotation, build_mask, ConditioningMask};
use crate::nn::{self, Adam, AdamConfig, CheckpointHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    /// Critic updates to run.
    pub total_steps: u64,
    pub batch_size: i64,
    pub adam: AdamConfig,
    pub label_flip_period: u64,
    /// Flip labels at random with this probability instead of on a fixed
    /// period.
    pub flip_prob: Option<f64>,
    pub include_normals: bool,
    pub critic_steps_per_gen_step: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub loss: GanLossConfig,
    /// Growth schedule, in training images per phase.
    pub fade_images: u64,
    pub stable_images: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 40_000,
            batch_size: 16,
            adam: AdamConfig::default(),
            label_flip_period: 3,
            flip_prob: None,
            include_normals: false,
            critic_steps_per_gen_step: 1,
            checkpoint_every: 0,
            seed: 0,
            loss: GanLossConfig::default(),
            fade_images: 70_000,
            stable_images: 70_000,
        }
    }
}

impl GanTrainConfig {
    /// 40k critic steps at batch 8, growth phases split evenly over the run.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            fade_images: 35_552,
            stable_images: 35_552,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.label_flip_period < 1 {
            return Err(Error::InvalidConfig("label_flip_period must be at least 1".into()));
        }
        if self.critic_steps_per_gen_step < 1 {
            return Err(Error::InvalidConfig("critic_steps_per_gen_step must be at least 1".into()));
        }
        if self.loss.lambda_gp < 0.0 {
            return Err(Error::InvalidConfig("lambda_gp must be non-negative".into()));
        }
        if let Some(p) = self.flip_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("flip_prob {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether critic step `step` (1-based) uses flipped labels under the
    /// periodic rule.
    pub fn flips_at(&self, step: u64) -> bool {
        step % self.label_flip_period == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub critic_loss: f64,
    pub gradient_penalty: f64,
    pub generator_loss: Option<f64>,
    pub flipped: bool,
}

/// A trained (or freshly initialized) GAN with its training record.
pub struct TrainedGan<M> {
    pub model: M,
    pub header: CheckpointHeader,
    pub history: Vec<LossRecord>,
    /// Every record id that entered a training batch.
    pub batch_ids: BTreeSet<String>,
}

impl<M: ConditionalGan> TrainedGan<M> {
    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, &self.header, &self.model.named_tensors())
    }

    pub fn final_position(&self) -> StagePos {
        StagePos {
            stage: self.header.stage,
            alpha: self.header.alpha,
        }
    }
}

/// Images of `records` at full resolution, stacked once up front.
struct Pool {
    images: Tensor,
    masks: Tensor,
    ids: Vec<String>,
}

impl Pool {
    fn new(records: &[&ImageRecord], resolution: i64, kind: Kind) -> Result<Self> {
        let images: Vec<&GrayImage> = records.iter().map(|r| &r.image).collect();
        let masks = records
            .iter()
            .map(|r| build_mask(&r.boxes, resolution as u32))
            .collect::<Result<Vec<_>>>()?;
        let mask_refs: Vec<&ConditioningMask> = masks.iter().collect();
        Ok(Self {
            images: images_to_tensor(&images, kind)?,
            masks: masks_to_tensor(&mask_refs, kind)?,
            ids: records.iter().map(|r| r.id.clone()).collect(),
        })
    }
}

/// Downsamples `images` to `resolution`, blending towards the coarser
/// stage while a new block fades in.
fn real_at(images: &Tensor, pos: StagePos, resolution: i64) -> Tensor {
    let mut x = images.shallow_clone();
    while x.size()[2] > resolution {
        x = downsample2(&x);
    }
    if pos.stage > 0 && pos.alpha < 1.0 {
        let coarse = upsample2(&downsample2(&x));
        x = &x * pos.alpha + coarse * (1.0 - pos.alpha);
    }
    x
}

/// Checks admission rules and returns the records a batch may draw from.
fn admit<'a>(records: &'a [ImageRecord], normals: &'a [ImageRecord], include_normals: bool, resolution: i64) -> Result<Vec<&'a ImageRecord>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no training records for GAN training"));
    }
    let mut pool: Vec<&ImageRecord> = records.iter().collect();
    if include_normals {
        pool.extend(normals.iter());
    }
    for r in &pool {
        if r.provenance == Provenance::Synthetic {
            return Err(Error::InvalidConfig(format!("synthetic record {} cannot train a GAN", r.id)));
        }
        if r.image.width() as i64 != resolution || r.image.height() as i64 != resolution {
            return Err(Error::Shape(format!(
                "record {} is {}x{}, schedule targets {resolution}",
                r.id,
                r.image.width(),
                r.image.height()
            )));
        }
    }
    Ok(pool)
}

/// Runs the adversarial loop on an already-built model.
///
/// `records` must come from the training split only; `normals` (tumor-free
/// images) are pooled in when `config.include_normals` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_model<M: ConditionalGan>(
    model: M,
    model_config: serde_json::Value,
    config: &GanTrainConfig,
    records: &[ImageRecord],
    normals: &[ImageRecord],
    schedule: &ProgressiveSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedGan<M>> {
    config.validate()?;
    if schedule.target() != model.target_resolution() {
        return Err(Error::Shape(format!(
            "schedule ends at {} but the model produces {}",
            schedule.target(),
            model.target_resolution()
        )));
    }
    let pool_records = admit(records, normals, config.include_normals, schedule.target())?;
    let kind = model.kind();
    let pool = Pool::new(&pool_records, schedule.target(), kind)?;
    let n = pool_records.len();

    let train_subjects: Vec<String> = pool_records
        .iter()
        .map(|r| r.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let full_config = serde_json::json!({ "model": model_config, "train": config, "schedule": schedule });
    let mut header = CheckpointHeader {
        format_version: nn::CHECKPOINT_VERSION,
        kind: model.family().to_string(),
        config_hash: nn::config_hash(&model_config),
        config: full_config,
        stage: schedule.position(0).stage,
        alpha: schedule.position(0).alpha,
        step: 0,
        train_subjects,
        extra: serde_json::Value::Null,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut critic_opt = Adam::new(model.critic_params(), config.adam);
    let mut gen_opt = Adam::new(model.generator_params(), config.adam);
    let mut history = Vec::with_capacity(config.total_steps as usize);
    let mut batch_ids = BTreeSet::new();
    let mut images_seen = 0u64;

    for step in 1..=config.total_steps {
        let pos = schedule.position(images_seen);
        let idx: Vec<i64> = (0..config.batch_size).map(|_| rng.random_range(0..n) as i64).collect();
        for &i in &idx {
            if !batch_ids.contains(&pool.ids[i as usize]) {
                batch_ids.insert(pool.ids[i as usize].clone());
            }
        }
        let idx_t = Tensor::from_slice(&idx);
        let real = real_at(&pool.images.index_select(0, &idx_t), pos, schedule.stages[pos.stage]);
        let masks = pool.masks.index_select(0, &idx_t);

        let z = model.sample_latent(config.batch_size, &mut rng);
        let fake = model.generate(&z, &masks, pos, true)?.detach();
        let eps = sample_epsilon(&mut rng, config.batch_size, kind);
        let gp = gradient_penalty(|x| model.critique(x, &masks, pos), &real, &fake, config.loss.lambda_gp, &eps)?;
        let real_scores = model.critique(&real, &masks, pos)?;
        let fake_scores = model.critique(&fake, &masks, pos)?;
        let flipped = match config.flip_prob {
            Some(p) => rng.random_bool(p),
            None => config.flips_at(step),
        };
        let mut d_loss = if flipped {
            critic_loss(&fake_scores, &real_scores, &gp)?
        } else {
            critic_loss(&real_scores, &fake_scores, &gp)?
        };
        if config.loss.drift_epsilon > 0.0 {
            d_loss = d_loss + real_scores.square().mean(kind) * config.loss.drift_epsilon;
        }
        critic_opt.zero_grad();
        d_loss.backward();
        critic_opt.step();

        let mut g_value = None;
        if step % config.critic_steps_per_gen_step == 0 {
            let z = model.sample_latent(config.batch_size, &mut rng);
            let fake = model.generate(&z, &masks, pos, true)?;
            let g_loss = generator_loss(&model.critique(&fake, &masks, pos)?)?;
            gen_opt.zero_grad();
            g_loss.backward();
            gen_opt.step();
            g_value = Some(g_loss.double_value(&[]));
        }

        images_seen += config.batch_size as u64;
        history.push(LossRecord {
            step,
            stage: pos.stage,
            alpha: pos.alpha,
            critic_loss: d_loss.double_value(&[]),
            gradient_penalty: gp.double_value(&[]),
            generator_loss: g_value,
            flipped,
        });
        header.stage = pos.stage;
        header.alpha = pos.alpha;
        header.step = step;
        if step % 1000 == 0 {
            log::info!(
                "step {step} stage {} alpha {:.3} critic {:.4} gp {:.4}",
                pos.stage,
                pos.alpha,
                d_loss.double_value(&[]),
                gp.double_value(&[])
            );
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                nn::save_checkpoint(&dir.join(format!("{}-{step:08}.ckpt", model.family())), &header, &model.named_tensors())?;
            }
        }
    }
    // Training may end mid-schedule; record where the next step would be.
    let end = schedule.position(images_seen);
    if config.total_steps == 0 || end.stage == header.stage {
        header.stage = end.stage;
        header.alpha = end.alpha;
    }
    let trained = TrainedGan {
        model,
        header,
        history,
        batch_ids,
    };
    if let Some(dir) = checkpoint_dir {
        trained.save(&dir.join(format!("{}-final.ckpt", trained.model.family())))?;
    }
    Ok(trained)
}

/// Builds a conditional progressive GAN from `gan_config` and trains it.
pub fn train_gan(
    gan_config: &GanConfig,
    config: &GanTrainConfig,
    records: &[ImageRecord],
    normals: &[ImageRecord],
    schedule: &ProgressiveSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedGan<Cpggan>> {
    let model = Cpggan::new(gan_config, config.seed, Kind::Float)?;
    train_model(
        model,
        serde_json::to_value(gan_config)?,
        config,
        records,
        normals,
        schedule,
        checkpoint_dir,
    )
}

/// Loads a progressive GAN checkpoint, rebuilding the model from its header.
pub fn load_cpggan(path: &Path) -> Result<TrainedGan<Cpggan>> {
    let (header, tensors) = nn::load_checkpoint(path, "cpggan", None)?;
    let stored = header.config["model"].clone();
    if nn::config_hash(&stored) != header.config_hash {
        return Err(Error::Checkpoint {
            path: PathBuf::from(path),
            reason: "stored config does not match its hash".into(),
        });
    }
    let cfg: GanConfig = serde_json::from_value(stored)?;
    let mut model = Cpggan::new(&cfg, 0, Kind::Float)?;
    model.load_tensors(&tensors)?;
    Ok(TrainedGan {
        model,
        header,
        history: Vec::new(),
        batch_ids: BTreeSet::new(),
    })
}

/// Interior-box mean minus the mean of the surrounding ring, over the
/// union of `boxes`. The ring extends each box by half its longer side (at
/// least 2 px) and excludes every box interior. `None` when either region is
/// empty.
pub fn box_contrast(image: &GrayImage, boxes: &[BoundingBox]) -> Option<f64> {
    let (w, h) = image.dimensions();
    let inside = |x: i32, y: i32| boxes.iter().any(|b| x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max);
    let (mut si, mut ni, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let v = image.get_pixel(x as u32, y as u32)[0] as f64;
            if inside(x, y) {
                si += v;
                ni += 1;
            } else if boxes.iter().any(|b| {
                let m = (b.width().max(b.height()) + 1) / 2;
                let m = m.max(2);
                x >= b.x_min - m && x < b.x_max + m && y >= b.y_min - m && y < b.y_max + m
            }) {
                sr += v;
                nr += 1;
            }
        }
    }
    (ni > 0 && nr > 0).then(|| si / ni as f64 - sr / nr as f64)
}

pub fn passes_contrast(image: &GrayImage, boxes: &[BoundingBox], threshold: f64) -> bool {
    threshold <= 0.0 || box_contrast(image, boxes).is_some_and(|c| c >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub count: usize,
    pub augment: bool,
    /// Minimum interior-over-ring contrast in gray levels; 0 disables.
    pub quality_filter: f64,
    /// Subject tag for the generated records.
    pub tag: String,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            count: 0,
            augment: true,
            quality_filter: 20.0,
            tag: "syn".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub records: Vec<ImageRecord>,
    pub attempts: usize,
    /// Ids of the training records whose annotations were reused.
    pub source_ids: BTreeSet<String>,
}

impl SampleOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            1.0
        } else {
            self.records.len() as f64 / self.attempts as f64
        }
    }
}

const SAMPLE_BATCH: usize = 32;

/// Generates synthetic records conditioned on training-split box sets.
///
/// Box sets are drawn from `annotation_source` (records with at least one
/// box), optionally augmented, rendered to masks and passed through the
/// generator at `pos`. Images failing the contrast filter are discarded and
/// replaced, up to ten attempts per requested image.
pub fn sample_images<M: ConditionalGan>(
    model: &M,
    pos: StagePos,
    request: &SampleRequest,
    annotation_source: &[ImageRecord],
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let mut out = SampleOutcome {
        records: Vec::with_capacity(request.count),
        attempts: 0,
        source_ids: BTreeSet::new(),
    };
    if request.count == 0 {
        return Ok(out);
    }
    let sources: Vec<&ImageRecord> = annotation_source.iter().filter(|r| !r.boxes.is_empty()).collect();
    if sources.is_empty() {
        return Err(Error::EmptyDataset("no annotated records to condition on"));
    }
    let size = model.target_resolution() as u32;
    let cap = request.count * 10;
    while out.records.len() < request.count {
        if out.attempts >= cap {
            return Err(Error::FilterCapExceeded {
                requested: request.count,
                accepted: out.records.len(),
                attempts: out.attempts,
                rate: out.acceptance_rate(),
            });
        }
        let batch = SAMPLE_BATCH.min(cap - out.attempts).min(request.count - out.records.len());
        let mut box_sets = Vec::with_capacity(batch);
        while box_sets.len() < batch {
            let src = sources[rng.random_range(0..sources.len())];
            if src.image.width() != size {
                return Err(Error::Shape(format!("annotation source {} is not {size}x{size}", src.id)));
            }
            let boxes = if request.augment {
                augment_annotation(&src.boxes, size, rng)
            } else {
                src.boxes.clone()
            };
            if !boxes.is_empty() {
                out.source_ids.insert(src.id.clone());
                box_sets.push(boxes);
            }
        }
        let masks = box_sets.iter().map(|b| build_mask(b, size)).collect::<Result<Vec<_>>>()?;
        let mask_refs: Vec<&ConditioningMask> = masks.iter().collect();
        let mask_t = masks_to_tensor(&mask_refs, model.kind())?;
        let z = model.sample_latent(batch as i64, rng);
        let mut images = tch::no_grad(|| model.generate(&z, &mask_t, pos, false))?;
        while images.size()[2] < size as i64 {
            images = upsample2(&images);
        }
        for (image, boxes) in tensor_to_images(&images)?.into_iter().zip(box_sets) {
            out.attempts += 1;
            if passes_contrast(&image, &boxes, request.quality_filter) {
                let k = out.records.len();
                out.records.push(ImageRecord {
                    id: format!("images/{}/img{k:05}.png", request.tag),
                    image,
                    boxes,
                    subject_id: request.tag.clone(),
                    provenance: Provenance::Synthetic,
                });
            }
        }
    }
    Ok(out)
}
