//! The augmentation experiment matrix: one detector per data setup, each
//! trained on the real training split plus a generated pool, selected on
//! validation and scored once on test.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplits, ImageRecord};
use crate::detector::{ground_truth, train_detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::gan::ConditionalGan;
use crate::img2img::load_img2img;
use crate::metrics::{evaluate, write_results_csv, EvalResult, ResultsRow};
use crate::trainer::{load_cpggan, sample_images, SampleRequest, TrainedGan};

/// Nominal real training count the synthetic tiers are defined against.
pub const REFERENCE_REAL_COUNT: f64 = 2813.0;

/// Nominal synthetic pool sizes of the three tiers.
pub const SYNTHETIC_TIERS: [usize; 3] = [4000, 8000, 12000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RealOnly,
    Cpggan,
    CpgganNormal,
    Img2img,
}

impl Family {
    pub fn prefix(&self) -> &'static str {
        match self {
            Family::RealOnly => "real_only",
            Family::Cpggan => "cpggan",
            Family::CpgganNormal => "cpggan_normal",
            Family::Img2img => "img2img",
        }
    }
}

/// All ten setups in table order.
pub fn all_setups() -> Vec<String> {
    let mut out = vec!["real_only".to_string()];
    for f in [Family::Cpggan, Family::CpgganNormal, Family::Img2img] {
        for t in SYNTHETIC_TIERS {
            out.push(format!("{}_{}k", f.prefix(), t / 1000));
        }
    }
    out
}

/// Splits a setup id into its family and nominal synthetic count.
pub fn parse_setup(id: &str) -> Result<(Family, usize)> {
    if id == "real_only" {
        return Ok((Family::RealOnly, 0));
    }
    for f in [Family::CpgganNormal, Family::Cpggan, Family::Img2img] {
        if let Some(rest) = id.strip_prefix(f.prefix()).and_then(|r| r.strip_prefix('_')) {
            if let Some(t) = SYNTHETIC_TIERS.iter().find(|&&t| rest == format!("{}k", t / 1000)) {
                return Ok((f, *t));
            }
        }
    }
    Err(Error::InvalidConfig(format!("unknown setup {id:?}")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub cpggan: Option<PathBuf>,
    pub cpggan_normal: Option<PathBuf>,
    pub img2img: Option<PathBuf>,
}

impl CheckpointPaths {
    pub fn for_family(&self, f: Family) -> Option<&Path> {
        match f {
            Family::RealOnly => None,
            Family::Cpggan => self.cpggan.as_deref(),
            Family::CpgganNormal => self.cpggan_normal.as_deref(),
            Family::Img2img => self.img2img.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSettings {
    pub augment: bool,
    pub quality_filter: f64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            augment: true,
            quality_filter: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    /// Master seed. Every detector is initialized from it, so setups differ
    /// only in their training data.
    pub seed: u64,
    /// Dataset root with `train`, `val` and `test` splits.
    pub data: Option<PathBuf>,
    pub setups: Vec<String>,
    /// Multiplies every synthetic pool size after scaling to the real
    /// training count.
    pub desk_factor: f64,
    pub checkpoints: CheckpointPaths,
    pub sample: SampleSettings,
    pub detector: DetectorConfig,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            setups: all_setups(),
            desk_factor: 1.0,
            checkpoints: CheckpointPaths::default(),
            sample: SampleSettings::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl MatrixConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Makes relative data and checkpoint paths relative to `base`, usually
    /// the directory of the config file.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.data);
        fix(&mut self.checkpoints.cpggan);
        fix(&mut self.checkpoints.cpggan_normal);
        fix(&mut self.checkpoints.img2img);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.desk_factor > 0.0) {
            return Err(Error::InvalidConfig("desk_factor must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.setups {
            parse_setup(s)?;
            if !seen.insert(s) {
                return Err(Error::InvalidConfig(format!("setup {s} listed twice")));
            }
        }
        self.detector.validate()
    }
}

/// Synthetic pool size for a nominal tier, keeping the tier's ratio to the
/// reference real count.
pub fn scaled_count(nominal: usize, real_count: usize, desk_factor: f64) -> usize {
    (nominal as f64 / REFERENCE_REAL_COUNT * real_count as f64 * desk_factor).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub setup_id: String,
    pub family: Family,
    pub synthetic_count: usize,
    pub gan_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

/// Resolves the configured setups against a real training set.
pub fn plan_runs(config: &MatrixConfig, real_count: usize) -> Result<Vec<ExperimentRun>> {
    config.validate()?;
    config
        .setups
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (family, nominal) = parse_setup(id)?;
            Ok(ExperimentRun {
                setup_id: id.clone(),
                family,
                synthetic_count: scaled_count(nominal, real_count, config.desk_factor),
                gan_checkpoint: config.checkpoints.for_family(family).map(Path::to_path_buf),
                seed: config.seed.wrapping_add(i as u64),
            })
        })
        .collect()
}

/// Id and subject overlaps between the test split and one run's training
/// inputs. Every list is empty for a clean run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub setup_id: String,
    pub detector_train: Vec<String>,
    pub anchor_boxes: Vec<String>,
    pub selection: Vec<String>,
    pub annotation_source: Vec<String>,
    pub gan_subjects: Vec<String>,
}

impl LeakageAudit {
    pub fn is_clean(&self) -> bool {
        self.detector_train.is_empty()
            && self.anchor_boxes.is_empty()
            && self.selection.is_empty()
            && self.annotation_source.is_empty()
            && self.gan_subjects.is_empty()
    }
}

fn overlap<'a>(a: &BTreeSet<String>, b: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    b.into_iter().filter(|x| a.contains(*x)).cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: ExperimentRun,
    pub synthetic_generated: usize,
    pub sample_attempts: usize,
    pub selected_step: u64,
    pub detector_config: serde_json::Value,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutcome {
    pub rows: Vec<ResultsRow>,
    pub runs: Vec<RunRecord>,
    pub skipped: Vec<(String, String)>,
    pub audits: Vec<LeakageAudit>,
}

struct Pool {
    records: Vec<ImageRecord>,
    attempts: usize,
    source_ids: BTreeSet<String>,
    gan_subjects: Vec<String>,
}

fn sample_pool<M: ConditionalGan>(gan: &TrainedGan<M>, run: &ExperimentRun, settings: &SampleSettings, train: &[ImageRecord]) -> Result<Pool> {
    let request = SampleRequest {
        count: run.synthetic_count,
        augment: settings.augment,
        quality_filter: settings.quality_filter,
        tag: run.setup_id.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let out = sample_images(&gan.model, gan.final_position(), &request, train, &mut rng)?;
    Ok(Pool {
        records: out.records,
        attempts: out.attempts,
        source_ids: out.source_ids,
        gan_subjects: gan.header.train_subjects.clone(),
    })
}

fn synthesize(run: &ExperimentRun, path: &Path, settings: &SampleSettings, train: &[ImageRecord]) -> Result<Pool> {
    match run.family {
        Family::RealOnly => unreachable!("real-only runs sample nothing"),
        Family::Cpggan | Family::CpgganNormal => sample_pool(&load_cpggan(path)?, run, settings, train),
        Family::Img2img => sample_pool(&load_img2img(path)?, run, settings, train),
    }
}

/// Runs every configured setup on `splits` and writes the results table,
/// the configuration, per-run records and the leakage audit to `out_dir`.
///
/// A setup whose generator checkpoint is missing is skipped with a logged
/// reason; the remaining setups still run. Anchors are recomputed from each
/// setup's own training boxes. The test split is only used for the final
/// score of each selected detector.
pub fn run_matrix(config: &MatrixConfig, splits: &DatasetSplits, out_dir: &Path) -> Result<MatrixOutcome> {
    let runs = plan_runs(config, splits.train.len())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("matrix.toml"), config.to_toml()?)?;

    let test_ids: BTreeSet<String> = splits.test.iter().map(|r| r.id.clone()).collect();
    let test_subjects: BTreeSet<String> = splits.test.iter().map(|r| r.subject_id.clone()).collect();
    let test_gt = ground_truth(&splits.test);
    let mut outcome = MatrixOutcome::default();

    for run in runs {
        let pool = match (run.family, &run.gan_checkpoint) {
            (Family::RealOnly, _) => None,
            (_, Some(p)) if p.is_file() => Some(synthesize(&run, p, &config.sample, &splits.train)?),
            (_, p) => {
                let reason = match p {
                    Some(p) => format!("checkpoint {} not found", p.display()),
                    None => format!("no {} checkpoint configured", run.family.prefix()),
                };
                log::warn!("skipping {}: {reason}", run.setup_id);
                outcome.skipped.push((run.setup_id.clone(), reason));
                continue;
            }
        };
        let mut train = splits.train.clone();
        let (generated, attempts, source_ids, gan_subjects) = match pool {
            Some(p) => {
                let n = p.records.len();
                train.extend(p.records);
                (n, p.attempts, p.source_ids, p.gan_subjects)
            }
            None => (0, 0, BTreeSet::new(), Vec::new()),
        };
        log::info!("{}: {} real + {generated} synthetic", run.setup_id, splits.train.len());

        let mut det_cfg = config.detector.clone();
        det_cfg.anchors = None;
        det_cfg.seed = config.seed;
        let run_dir = out_dir.join(&run.setup_id);
        let trained = train_detector(&det_cfg, &train, &splits.val, Some(&run_dir))?;
        let dets = trained
            .net
            .detect_records(&splits.test, det_cfg.eval_res, det_cfg.conf_threshold, det_cfg.nms_iou)?;
        let result = evaluate(&dets, &test_gt)?;

        let train_ids: BTreeSet<String> = train.iter().map(|r| r.id.clone()).collect();
        let val_ids: Vec<String> = splits.val.iter().map(|r| r.id.clone()).collect();
        let mut detector_overlap = overlap(&test_ids, &trained.batch_ids);
        detector_overlap.extend(overlap(&test_subjects, &trained.header.train_subjects));
        let audit = LeakageAudit {
            setup_id: run.setup_id.clone(),
            detector_train: detector_overlap,
            anchor_boxes: overlap(&test_ids, &train_ids),
            selection: overlap(&test_ids, &val_ids),
            annotation_source: overlap(&test_ids, &source_ids),
            gan_subjects: overlap(&test_subjects, &gan_subjects),
        };
        if !audit.is_clean() {
            log::error!("{}: test split leaked into training inputs", run.setup_id);
        }

        let record = RunRecord {
            run: run.clone(),
            synthetic_generated: generated,
            sample_attempts: attempts,
            selected_step: trained.selected.step,
            detector_config: trained.header.config.clone(),
            result: result.clone(),
        };
        fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
        outcome.rows.push(ResultsRow {
            setup: run.setup_id.clone(),
            result,
        });
        outcome.runs.push(record);
        outcome.audits.push(audit);
        write_results_csv(&out_dir.join("results.csv"), &outcome.rows)?;
    }

    write_results_csv(&out_dir.join("results.csv"), &outcome.rows)?;
    fs::write(out_dir.join("leakage.json"), serde_json::to_string_pretty(&outcome.audits)?)?;
    let skipped: BTreeMap<&str, &str> = outcome.skipped.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    fs::write(out_dir.join("skipped.json"), serde_json::to_string_pretty(&skipped)?)?;
    Ok(outcome)
}
