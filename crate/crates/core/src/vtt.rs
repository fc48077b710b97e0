//! Visual Turing Test sessions.
//!
//! A session is a shuffled, balanced list of real and synthetic images
//! answered one at a time. Every state change is appended to a JSON-lines
//! journal so that a session can be rebuilt after a restart, and finalizing
//! writes an audit log from which the confusion matrix can be recomputed.
//!
//! Nothing served to a rater ([`RaterItem`], [`SessionStatus`]) carries the
//! ground truth; it only appears in the [`Report`] of a finalized session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::GrayImage;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::dataset::ImageRecord;
use crate::embed::{area_resize, confusion_stats, ConfusionMatrix, Label, Response};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Crop32Plain,
    Crop32Normal,
    Full256Plain,
    Full256Normal,
}

impl TestKind {
    pub const ALL: [TestKind; 4] = [
        TestKind::Crop32Plain,
        TestKind::Crop32Normal,
        TestKind::Full256Plain,
        TestKind::Full256Normal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Crop32Plain => "crop32_plain",
            TestKind::Crop32Normal => "crop32_normal",
            TestKind::Full256Plain => "full256_plain",
            TestKind::Full256Normal => "full256_normal",
        }
    }

    pub fn is_crop(&self) -> bool {
        matches!(self, TestKind::Crop32Plain | TestKind::Crop32Normal)
    }

    /// Side length of the images shown to the rater.
    pub fn image_size(&self) -> usize {
        if self.is_crop() {
            32
        } else {
            256
        }
    }

    /// Whether the synthetic pool comes from a generator trained with
    /// additional normal images.
    pub fn uses_normal_synthetic(&self) -> bool {
        matches!(self, TestKind::Crop32Normal | TestKind::Full256Normal)
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown test kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub item_id: String,
    /// Image reference, resolved by whoever serves the session.
    pub image: String,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub label: Label,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VttSession {
    pub session_id: String,
    pub test_kind: TestKind,
    pub allow_revisit: bool,
    pub items: Vec<SessionItem>,
    pub answers: Vec<Option<Answer>>,
    pub cursor: usize,
    pub finalized_at: Option<u64>,
}

/// The current item as shown to a rater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterItem {
    pub session_id: String,
    pub item_id: String,
    pub position: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub test_kind: TestKind,
    pub total: usize,
    pub answered: usize,
    pub cursor: usize,
    pub complete: bool,
    pub finalized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item_id: String,
    pub image: String,
    pub truth: Label,
    pub response: Label,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub test_kind: TestKind,
    pub matrix: ConfusionMatrix,
    pub log: Vec<AuditEntry>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl VttSession {
    /// Draws `n_each` images from each pool without replacement and
    /// interleaves them with a seeded shuffle.
    pub fn create(
        session_id: impl Into<String>,
        real_pool: &[String],
        synt_pool: &[String],
        n_each: usize,
        test_kind: TestKind,
        seed: u64,
    ) -> Result<Self> {
        for (name, pool) in [("real", real_pool), ("synthetic", synt_pool)] {
            if pool.len() < n_each {
                return Err(Error::Session(format!(
                    "{name} pool has {} images, {n_each} requested",
                    pool.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn: Vec<(String, Label)> = Vec::with_capacity(2 * n_each);
        for (pool, truth) in [(real_pool, Label::Real), (synt_pool, Label::Synthetic)] {
            let picks = index::sample(&mut rng, pool.len(), n_each);
            drawn.extend(picks.into_iter().map(|i| (pool[i].clone(), truth)));
        }
        drawn.shuffle(&mut rng);
        let items: Vec<SessionItem> = drawn
            .into_iter()
            .enumerate()
            .map(|(k, (image, truth))| SessionItem {
                item_id: format!("item{k:03}"),
                image,
                truth,
            })
            .collect();
        Ok(Self {
            session_id: session_id.into(),
            test_kind,
            allow_revisit: false,
            answers: vec![None; items.len()],
            items,
            cursor: 0,
            finalized_at: None,
        })
    }

    pub fn with_revisit(mut self, allow: bool) -> Self {
        self.allow_revisit = allow;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn answered(&self) -> usize {
        self.answers.iter().filter(|a| a.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.answers.iter().all(Option::is_some)
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized_at.is_some()
    }

    pub fn item(&self, item_id: &str) -> Option<&SessionItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus {
            session_id: self.session_id.clone(),
            test_kind: self.test_kind,
            total: self.len(),
            answered: self.answered(),
            cursor: self.cursor,
            complete: self.is_complete(),
            finalized: self.is_finalized(),
        }
    }

    /// The item awaiting an answer, or `None` once all are answered.
    pub fn next_item(&self) -> Option<RaterItem> {
        self.items.get(self.cursor).map(|i| RaterItem {
            session_id: self.session_id.clone(),
            item_id: i.item_id.clone(),
            position: self.cursor,
            total: self.len(),
        })
    }

    /// Records an answer. Only the cursor item may be answered unless
    /// revisits are allowed, in which case earlier answers may be replaced.
    /// On error the session is unchanged.
    pub fn record_response(&mut self, item_id: &str, label: Label, at_ms: u64) -> Result<()> {
        if self.is_finalized() {
            return Err(Error::Session("session is finalized".into()));
        }
        let idx = self
            .items
            .iter()
            .position(|i| i.item_id == item_id)
            .ok_or_else(|| Error::Session(format!("unknown item {item_id}")))?;
        if idx != self.cursor {
            let revisit = self.allow_revisit && idx < self.cursor;
            if !revisit {
                let why = if self.answers[idx].is_some() { "already answered" } else { "not the current item" };
                return Err(Error::Session(format!("item {item_id} is {why}")));
            }
        }
        self.answers[idx] = Some(Answer { label, at_ms });
        while self.cursor < self.len() && self.answers[self.cursor].is_some() {
            self.cursor += 1;
        }
        Ok(())
    }

    pub fn responses(&self) -> Vec<Response> {
        self.items
            .iter()
            .zip(&self.answers)
            .filter_map(|(i, a)| {
                a.as_ref().map(|a| Response {
                    item_id: i.item_id.clone(),
                    truth: i.truth,
                    answer: a.label,
                })
            })
            .collect()
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.items
            .iter()
            .zip(&self.answers)
            .filter_map(|(i, a)| {
                a.as_ref().map(|a| AuditEntry {
                    item_id: i.item_id.clone(),
                    image: i.image.clone(),
                    truth: i.truth,
                    response: a.label,
                    at_ms: a.at_ms,
                })
            })
            .collect()
    }

    /// Closes a complete session and tallies it. Calling it again returns
    /// the same report.
    pub fn finalize(&mut self, at_ms: u64) -> Result<Report> {
        if !self.is_complete() {
            return Err(Error::Session(format!(
                "session incomplete: {} of {} answered",
                self.answered(),
                self.len()
            )));
        }
        let report = self.report()?;
        self.finalized_at.get_or_insert(at_ms);
        Ok(report)
    }

    fn report(&self) -> Result<Report> {
        Ok(Report {
            session_id: self.session_id.clone(),
            test_kind: self.test_kind,
            matrix: confusion_stats(&self.responses())?,
            log: self.audit_log(),
        })
    }

    /// The report of a finalized session.
    pub fn final_report(&self) -> Result<Report> {
        if !self.is_finalized() {
            return Err(Error::Session("session is not finalized".into()));
        }
        self.report()
    }
}

/// Recomputes the confusion matrix from an audit log.
pub fn replay_audit(log: &[AuditEntry]) -> Result<ConfusionMatrix> {
    let responses: Vec<Response> = log
        .iter()
        .map(|e| Response {
            item_id: e.item_id.clone(),
            truth: e.truth,
            answer: e.response,
        })
        .collect();
    confusion_stats(&responses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    Created {
        session_id: String,
        test_kind: TestKind,
        allow_revisit: bool,
        items: Vec<SessionItem>,
    },
    Response {
        item_id: String,
        label: Label,
        at_ms: u64,
    },
    Finalized {
        at_ms: u64,
    },
}

/// Directory of session journals (`{id}.jsonl`) and audit logs
/// (`{id}.audit.jsonl`).
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn journal_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    pub fn audit_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.audit.jsonl"))
    }

    /// Ids of all journaled sessions, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                if !id.ends_with(".audit") {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// An id not yet used in this store.
    pub fn fresh_id(&self) -> Result<String> {
        let ids = self.session_ids()?;
        let next = ids
            .iter()
            .filter_map(|id| id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(0, |n| n + 1);
        Ok(format!("s{next:06}"))
    }

    fn append(&self, session_id: &str, event: &JournalEvent, create: bool) -> Result<()> {
        let path = self.journal_path(session_id);
        let mut opts = OpenOptions::new();
        if create {
            opts.write(true).create_new(true);
        } else {
            opts.append(true);
        }
        let mut f = opts.open(&path)?;
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    /// Starts the journal of a new session.
    pub fn create(&self, session: &VttSession) -> Result<()> {
        if session.answered() > 0 || session.is_finalized() {
            return Err(Error::Session("only fresh sessions can be journaled".into()));
        }
        let event = JournalEvent::Created {
            session_id: session.session_id.clone(),
            test_kind: session.test_kind,
            allow_revisit: session.allow_revisit,
            items: session.items.clone(),
        };
        self.append(&session.session_id, &event, true)
    }

    /// Records an answer and journals it.
    pub fn respond(&self, session: &mut VttSession, item_id: &str, label: Label) -> Result<()> {
        let at_ms = now_ms();
        session.record_response(item_id, label, at_ms)?;
        let event = JournalEvent::Response {
            item_id: item_id.to_string(),
            label,
            at_ms,
        };
        self.append(&session.session_id, &event, false)
    }

    /// Finalizes the session, journaling the first finalization and
    /// writing the audit log.
    pub fn finalize(&self, session: &mut VttSession) -> Result<Report> {
        let first = !session.is_finalized();
        let at_ms = now_ms();
        let report = session.finalize(at_ms)?;
        if first {
            self.append(&session.session_id, &JournalEvent::Finalized { at_ms }, false)?;
            let mut out = String::new();
            for e in &report.log {
                out.push_str(&serde_json::to_string(e)?);
                out.push('\n');
            }
            fs::write(self.audit_path(&session.session_id), out)?;
        }
        Ok(report)
    }

    /// Rebuilds a session by replaying its journal.
    pub fn load(&self, session_id: &str) -> Result<VttSession> {
        let path = self.journal_path(session_id);
        let reader = BufReader::new(File::open(&path)?);
        let mut session: Option<VttSession> = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: path.clone(),
                line: n + 1,
                reason,
            };
            let event: JournalEvent = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            match (event, session.as_mut()) {
                (
                    JournalEvent::Created {
                        session_id,
                        test_kind,
                        allow_revisit,
                        items,
                    },
                    None,
                ) => {
                    session = Some(VttSession {
                        session_id,
                        test_kind,
                        allow_revisit,
                        answers: vec![None; items.len()],
                        items,
                        cursor: 0,
                        finalized_at: None,
                    });
                }
                (JournalEvent::Response { item_id, label, at_ms }, Some(s)) => {
                    s.record_response(&item_id, label, at_ms).map_err(|e| parse_err(e.to_string()))?;
                }
                (JournalEvent::Finalized { at_ms }, Some(s)) => {
                    s.finalize(at_ms).map_err(|e| parse_err(e.to_string()))?;
                }
                (_, _) => return Err(parse_err("event out of sequence".into())),
            }
        }
        session.ok_or_else(|| Error::Parse {
            path,
            line: 0,
            reason: "empty journal".into(),
        })
    }

    pub fn read_audit(&self, session_id: &str) -> Result<Vec<AuditEntry>> {
        let path = self.audit_path(session_id);
        let text = fs::read_to_string(&path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: n + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}

/// The image a rater sees for `record` under `kind`: the first box
/// resampled to 32x32, or the whole image resampled to 256x256.
pub fn rater_image(record: &ImageRecord, kind: TestKind) -> Option<GrayImage> {
    let (w, h) = record.image.dimensions();
    let region = if kind.is_crop() {
        *record.boxes.first()?
    } else {
        BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: w as i32,
            y_max: h as i32,
        }
    };
    let size = kind.image_size();
    let v = area_resize(&record.image, &region, size);
    let pixels = v.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(size as u32, size as u32, pixels)
}

/// Writes the rater images of `records` into `dir` and returns their file
/// names, which serve as pool image references. Records without boxes are
/// skipped for crop tests.
pub fn write_pool(records: &[ImageRecord], kind: TestKind, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for r in records {
        if let Some(img) = rater_image(r, kind) {
            let name = format!("{:05}.png", names.len());
            img.save(dir.join(&name))?;
            names.push(name);
        }
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(n: usize) -> (Vec<String>, Vec<String>) {
        (
            (0..n).map(|i| format!("real/{i}.png")).collect(),
            (0..n).map(|i| format!("syn/{i}.png")).collect(),
        )
    }

    fn answer_all(s: &mut VttSession, pick: impl Fn(&SessionItem) -> Label) {
        while let Some(next) = s.next_item() {
            let label = pick(s.item(&next.item_id).unwrap());
            s.record_response(&next.item_id, label, 0).unwrap();
        }
    }

    #[test]
    fn balanced_and_seeded() {
        let (r, s) = pools(80);
        let a = VttSession::create("a", &r, &s, 50, TestKind::Crop32Plain, 3).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.items.iter().filter(|i| i.truth == Label::Real).count(), 50);
        let b = VttSession::create("a", &r, &s, 50, TestKind::Crop32Plain, 3).unwrap();
        assert_eq!(a, b);
        let c = VttSession::create("a", &r, &s, 50, TestKind::Crop32Plain, 4).unwrap();
        assert_ne!(a.items, c.items);
        let mut images: Vec<_> = a.items.iter().map(|i| &i.image).collect();
        images.sort();
        images.dedup();
        assert_eq!(images.len(), 100);
    }

    #[test]
    fn pool_too_small() {
        let (r, s) = pools(10);
        assert!(VttSession::create("a", &r, &s[..5], 6, TestKind::Full256Plain, 0).is_err());
    }

    #[test]
    fn cursor_order_enforced() {
        let (r, s) = pools(2);
        let mut v = VttSession::create("a", &r, &s, 2, TestKind::Crop32Plain, 0).unwrap();
        assert!(v.record_response("item001", Label::Real, 0).is_err());
        v.record_response("item000", Label::Real, 0).unwrap();
        assert_eq!(v.cursor, 1);
        let before = v.clone();
        assert!(v.record_response("item000", Label::Synthetic, 0).is_err());
        assert!(v.record_response("nope", Label::Synthetic, 0).is_err());
        assert_eq!(v, before);
        assert!(v.finalize(0).is_err());
        answer_all(&mut v, |_| Label::Real);
        assert!(v.is_complete());
        assert!(v.next_item().is_none());
    }

    #[test]
    fn revisit_replaces_answer() {
        let (r, s) = pools(2);
        let mut v = VttSession::create("a", &r, &s, 2, TestKind::Crop32Plain, 0).unwrap().with_revisit(true);
        v.record_response("item000", Label::Real, 0).unwrap();
        v.record_response("item001", Label::Real, 0).unwrap();
        v.record_response("item000", Label::Synthetic, 1).unwrap();
        assert_eq!(v.cursor, 2);
        assert_eq!(v.answers[0].as_ref().unwrap().label, Label::Synthetic);
        assert!(v.record_response("item003", Label::Real, 0).is_err());
    }

    #[test]
    fn all_real_guesses() {
        let (r, s) = pools(50);
        let mut v = VttSession::create("a", &r, &s, 50, TestKind::Crop32Plain, 9).unwrap();
        answer_all(&mut v, |_| Label::Real);
        let rep = v.finalize(5).unwrap();
        assert_eq!(rep.matrix.accuracy, 0.5);
        assert_eq!(rep.matrix.synt_as_real, 50);
        assert_eq!(rep.matrix.total(), 100);
        assert_eq!(v.finalize(9).unwrap(), rep);
        assert_eq!(v.finalized_at, Some(5));
        assert!(v.record_response("item000", Label::Real, 0).is_err());
    }

    #[test]
    fn empty_session_finalize_errors() {
        let mut v = VttSession::create("a", &[], &[], 0, TestKind::Crop32Plain, 0).unwrap();
        assert!(v.is_complete());
        assert!(matches!(v.finalize(0), Err(Error::Responses(_))));
    }

    #[test]
    fn journal_replay_and_audit() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let (r, s) = pools(10);
        let id = store.fresh_id().unwrap();
        let mut v = VttSession::create(&id, &r, &s, 5, TestKind::Full256Normal, 1).unwrap();
        store.create(&v).unwrap();
        for k in 0..4 {
            let next = v.next_item().unwrap();
            let label = if k % 2 == 0 { Label::Real } else { Label::Synthetic };
            store.respond(&mut v, &next.item_id, label).unwrap();
        }
        assert!(store.respond(&mut v, "item000", Label::Real).is_err());
        assert_eq!(store.load(&id).unwrap(), v);
        let mut v = store.load(&id).unwrap();
        while let Some(n) = v.next_item() {
            let truth = v.item(&n.item_id).unwrap().truth;
            store.respond(&mut v, &n.item_id, truth).unwrap();
        }
        let rep = store.finalize(&mut v).unwrap();
        assert_eq!(store.finalize(&mut v).unwrap(), rep);
        let loaded = store.load(&id).unwrap();
        assert!(loaded.is_finalized());
        assert_eq!(loaded.final_report().unwrap().matrix, rep.matrix);
        assert_eq!(replay_audit(&store.read_audit(&id).unwrap()).unwrap(), rep.matrix);
        assert_eq!(store.session_ids().unwrap(), vec![id.clone()]);
        assert_eq!(store.fresh_id().unwrap(), "s000001");
    }

    #[test]
    fn rater_payloads_hide_truth() {
        let (r, s) = pools(3);
        let v = VttSession::create("a", &r, &s, 3, TestKind::Crop32Plain, 0).unwrap();
        for value in [
            serde_json::to_value(v.next_item().unwrap()).unwrap(),
            serde_json::to_value(v.status()).unwrap(),
        ] {
            let text = value.to_string();
            assert!(!text.contains("truth") && !text.contains("real/") && !text.contains("syn/"), "{text}");
        }
    }

    #[test]
    fn rater_images_have_kind_size() {
        let rec = ImageRecord {
            id: "x".into(),
            image: GrayImage::from_pixel(64, 64, image::Luma([100])),
            boxes: vec![BoundingBox::new(4, 4, 20, 12).unwrap()],
            subject_id: "s".into(),
            provenance: crate::dataset::Provenance::Real,
        };
        let crop = rater_image(&rec, TestKind::Crop32Plain).unwrap();
        assert_eq!(crop.dimensions(), (32, 32));
        assert!(crop.pixels().all(|p| p[0] == 100));
        assert_eq!(rater_image(&rec, TestKind::Full256Plain).unwrap().dimensions(), (256, 256));
        let bare = ImageRecord { boxes: vec![], ..rec };
        assert!(rater_image(&bare, TestKind::Crop32Normal).is_none());
    }
}
