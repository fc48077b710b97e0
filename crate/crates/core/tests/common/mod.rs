//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use cpggan::dataset::{split_dataset, DatasetSplits};
use cpggan::detector::{BackboneConfig, DetectorConfig};
use cpggan::gan::GanConfig;
use cpggan::img2img::UNetConfig;
use cpggan::phantom::{generate_corpus, PhantomSpec};
use cpggan::trainer::GanTrainConfig;
use cpggan::ImageRecord;

pub const SIZE: u32 = 32;

pub fn spec(subjects: usize) -> PhantomSpec {
    PhantomSpec {
        image_size: SIZE,
        subjects,
        slices_per_subject: 3,
        tumor_radius_range: [2.0, 4.0],
        ..PhantomSpec::desk()
    }
}

pub fn splits(seed: u64) -> DatasetSplits {
    split_dataset(generate_corpus(&spec(10), seed).unwrap(), (0.6, 0.2, 0.2), seed).unwrap()
}

pub fn normals(seed: u64) -> Vec<ImageRecord> {
    let s = PhantomSpec {
        tumor_count_range: [0, 0],
        ..spec(2)
    };
    generate_corpus(&s, seed).unwrap()
}

pub fn gan() -> GanConfig {
    GanConfig {
        latent_dim: 8,
        target_resolution: SIZE as i64,
        fmap_base: 64,
        fmap_max: 8,
        ..GanConfig::default()
    }
}

pub fn gan_train(steps: u64, seed: u64) -> GanTrainConfig {
    GanTrainConfig {
        total_steps: steps,
        batch_size: 2,
        seed,
        fade_images: 4,
        stable_images: 4,
        ..GanTrainConfig::default()
    }
}

pub fn unet() -> UNetConfig {
    UNetConfig {
        resolution: SIZE as i64,
        base_channels: 4,
        max_channels: 8,
        critic_channels: 4,
        ..UNetConfig::default()
    }
}

pub fn detector(steps: u64) -> DetectorConfig {
    DetectorConfig {
        train_res: 32,
        eval_res: 48,
        batch_size: 2,
        steps,
        eval_every: 2,
        num_anchors: 2,
        backbone: BackboneConfig {
            width: 4,
            max_width: 8,
            blocks_per_stage: 1,
        },
        ..DetectorConfig::default()
    }
}
