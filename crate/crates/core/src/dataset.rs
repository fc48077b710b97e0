//! Image records, subject-level splits and the on-disk corpus layout.
//!
//! A corpus directory holds one 8-bit grayscale PNG per slice under
//! `images/<subject>/` and one annotation file per split. Each annotation
//! line is
//!
//! ```text
//! images/s007/slice03.png 12,20,19,28 40,8,47,15
//! ```
//!
//! Normal images simply have no box tokens. The file stem names the split and
//! tells the loader the provenance: `normal.txt` holds tumor-free images,
//! `synthetic.txt` holds generated ones, anything else is real.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Unique identifier, also the path relative to the corpus root.
    pub id: String,
    pub image: GrayImage,
    pub boxes: Vec<BoundingBox>,
    pub subject_id: String,
    pub provenance: Provenance,
}

impl ImageRecord {
    pub fn size(&self) -> u32 {
        self.image.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image.dimensions();
        for b in &self.boxes {
            b.check_within(w, h)?;
        }
        if self.provenance == Provenance::Normal && !self.boxes.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "normal record {} carries boxes",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl DatasetSplits {
    pub fn subjects(records: &[ImageRecord]) -> BTreeSet<&str> {
        records.iter().map(|r| r.subject_id.as_str()).collect()
    }
}

/// Partitions records by subject so no subject appears in two splits.
///
/// Subjects are sorted before the seeded shuffle, so the partition does not
/// depend on input order. Split sizes are rounded from `ratios` and every
/// split receives at least one subject.
pub fn split_dataset(
    records: Vec<ImageRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplits> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut subjects: Vec<String> = records
        .iter()
        .map(|r| r.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = subjects.len();
    if n < 3 {
        return Err(Error::TooFewSubjects {
            subjects: n,
            splits: 3,
        });
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut n_train = ((a * n as f64).round() as usize).max(1);
    let mut n_val = ((b * n as f64).round() as usize).max(1);
    while n_train + n_val > n - 1 {
        if n_train >= n_val {
            n_train -= 1;
        } else {
            n_val -= 1;
        }
    }
    let train: HashSet<&str> = subjects[..n_train].iter().map(String::as_str).collect();
    let val: HashSet<&str> = subjects[n_train..n_train + n_val]
        .iter()
        .map(String::as_str)
        .collect();

    let mut splits = DatasetSplits::default();
    for r in records {
        if train.contains(r.subject_id.as_str()) {
            splits.train.push(r);
        } else if val.contains(r.subject_id.as_str()) {
            splits.val.push(r);
        } else {
            splits.test.push(r);
        }
    }
    Ok(splits)
}

fn provenance_for(stem: &str) -> Provenance {
    match stem {
        "normal" => Provenance::Normal,
        "synthetic" => Provenance::Synthetic,
        _ => Provenance::Real,
    }
}

/// Writes `records` as the split `split` under `root`, appending to the
/// annotation file if it already exists.
pub fn write_split(root: &Path, split: &str, records: &[ImageRecord]) -> Result<()> {
    fs::create_dir_all(root)?;
    let ann_path = root.join(format!("{split}.txt"));
    let mut ann = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ann_path)?;
    for r in records {
        let rel = PathBuf::from(&r.id);
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        r.image.save_with_format(&path, image::ImageFormat::Png)?;
        let mut line = r.id.clone();
        for b in &r.boxes {
            line.push(' ');
            line.push_str(&b.to_string());
        }
        writeln!(ann, "{line}")?;
    }
    Ok(())
}

/// Loads one split's annotation file (e.g. `train`) from `root`.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<ImageRecord>> {
    let ann_path = root.join(format!("{split}.txt"));
    let provenance = provenance_for(split);
    let file = fs::File::open(&ann_path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut tokens = line.split_whitespace();
        let Some(rel) = tokens.next() else { continue };
        let parse_err = |reason: String| Error::Parse {
            path: ann_path.clone(),
            line: i + 1,
            reason,
        };
        let boxes = tokens
            .map(|t| t.parse::<BoundingBox>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        let image = image::open(root.join(rel))?.into_luma8();
        let subject_id = subject_of(rel);
        let record = ImageRecord {
            id: rel.to_string(),
            image,
            boxes,
            subject_id,
            provenance,
        };
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Loads whichever of `train`, `val`, `test` exist under `root`.
pub fn read_splits(root: &Path) -> Result<DatasetSplits> {
    let load = |name: &str| -> Result<Vec<ImageRecord>> {
        if root.join(format!("{name}.txt")).exists() {
            read_split(root, name)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(DatasetSplits {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}

/// `images/<subject>/<file>` → `<subject>`.
fn subject_of(rel: &str) -> String {
    let parts: Vec<&str> = rel.split('/').collect();
    if parts.len() >= 2 {
        parts[parts.len() - 2].to_string()
    } else {
        rel.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(subject: usize, slice: usize) -> ImageRecord {
        ImageRecord {
            id: format!("images/s{subject:03}/slice{slice:02}.png"),
            image: GrayImage::new(8, 8),
            boxes: vec![],
            subject_id: format!("s{subject:03}"),
            provenance: Provenance::Real,
        }
    }

    fn subject_counts(s: &DatasetSplits) -> (usize, usize, usize) {
        (
            DatasetSplits::subjects(&s.train).len(),
            DatasetSplits::subjects(&s.val).len(),
            DatasetSplits::subjects(&s.test).len(),
        )
    }

    #[test]
    fn split_matches_patient_counts() {
        let records: Vec<_> = (0..180).flat_map(|s| (0..2).map(move |k| record(s, k))).collect();
        let splits =
            split_dataset(records, (126.0 / 180.0, 18.0 / 180.0, 36.0 / 180.0), 1).unwrap();
        assert_eq!(subject_counts(&splits), (126, 18, 36));
    }

    #[test]
    fn split_small_corpus() {
        let records: Vec<_> = (0..10).map(|s| record(s, 0)).collect();
        let splits = split_dataset(records, (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!(subject_counts(&splits), (7, 1, 2));
    }

    #[test]
    fn split_ignores_input_order() {
        let records: Vec<_> = (0..30).flat_map(|s| (0..3).map(move |k| record(s, k))).collect();
        let mut shuffled = records.clone();
        shuffled.reverse();
        let a = split_dataset(records, (0.7, 0.1, 0.2), 9).unwrap();
        let b = split_dataset(shuffled, (0.7, 0.1, 0.2), 9).unwrap();
        assert_eq!(DatasetSplits::subjects(&a.train), DatasetSplits::subjects(&b.train));
        assert_eq!(DatasetSplits::subjects(&a.val), DatasetSplits::subjects(&b.val));
        assert_eq!(DatasetSplits::subjects(&a.test), DatasetSplits::subjects(&b.test));
    }

    #[test]
    fn split_rejects_too_few_subjects() {
        let records: Vec<_> = (0..2).map(|s| record(s, 0)).collect();
        assert!(matches!(
            split_dataset(records, (0.7, 0.1, 0.2), 0),
            Err(Error::TooFewSubjects { .. })
        ));
        assert!(split_dataset(vec![record(0, 0)], (0.5, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record(3, 1);
        r.image.put_pixel(2, 3, image::Luma([200]));
        r.boxes = vec![BoundingBox::new(1, 1, 4, 5).unwrap()];
        let normal = ImageRecord {
            provenance: Provenance::Normal,
            ..record(4, 0)
        };
        write_split(dir.path(), "train", std::slice::from_ref(&r)).unwrap();
        write_split(dir.path(), "normal", std::slice::from_ref(&normal)).unwrap();
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back, vec![r]);
        let back = read_split(dir.path(), "normal").unwrap();
        assert_eq!(back[0].provenance, Provenance::Normal);
        assert!(back[0].boxes.is_empty());
        let text = fs::read_to_string(dir.path().join("normal.txt")).unwrap();
        assert_eq!(text, "images/s004/slice00.png\n");
    }
}
