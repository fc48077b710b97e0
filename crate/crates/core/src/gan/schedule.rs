use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where training sits in the growth schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePos {
    pub stage: usize,
    /// Fade-in weight of the newest block.
    pub alpha: f64,
}

impl StagePos {
    pub fn stable(stage: usize) -> Self {
        Self { stage, alpha: 1.0 }
    }

    pub fn resolution(&self) -> i64 {
        4 << self.stage
    }
}

/// Resolutions `4, 8, ..., target`. Stage 0 is trained for `stable_images`;
/// every later stage first fades in over `fade_images`, then trains for
/// `stable_images` at full weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub stages: Vec<i64>,
    pub fade_images: u64,
    pub stable_images: u64,
}

impl ProgressiveSchedule {
    /// A non-growing schedule at one resolution.
    pub fn single(resolution: i64) -> Self {
        Self {
            stages: vec![resolution],
            fade_images: 1,
            stable_images: 0,
        }
    }

    pub fn target(&self) -> i64 {
        *self.stages.last().expect("schedule has stages")
    }

    pub fn final_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn total_images(&self) -> u64 {
        self.stable_images + (self.stages.len() as u64 - 1) * (self.fade_images + self.stable_images)
    }

    /// Position after `images` training images; past the end the schedule
    /// holds the final stage at full weight.
    pub fn position(&self, images: u64) -> StagePos {
        if images < self.stable_images || self.stages.len() == 1 {
            return StagePos::stable(0);
        }
        let mut rest = images - self.stable_images;
        let per_stage = self.fade_images + self.stable_images;
        for stage in 1..self.stages.len() {
            if rest < per_stage {
                let alpha = if rest < self.fade_images {
                    rest as f64 / self.fade_images as f64
                } else {
                    1.0
                };
                return StagePos { stage, alpha };
            }
            rest -= per_stage;
        }
        StagePos::stable(self.final_stage())
    }
}

pub fn is_supported_resolution(r: i64) -> bool {
    (4..=256).contains(&r) && (r as u64).is_power_of_two()
}

pub fn build_schedule(target_resolution: i64, fade_images: u64, stable_images: u64) -> Result<ProgressiveSchedule> {
    if !(8..=256).contains(&target_resolution) || !(target_resolution as u64).is_power_of_two() {
        return Err(Error::BadResolution(target_resolution));
    }
    if fade_images == 0 {
        return Err(Error::InvalidConfig("fade_images must be positive".into()));
    }
    let mut stages = vec![4];
    while *stages.last().unwrap() < target_resolution {
        stages.push(stages.last().unwrap() * 2);
    }
    Ok(ProgressiveSchedule {
        stages,
        fade_images,
        stable_images,
    })
}
