//! Campaign state, the event log and the task queue.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use cxrinf_core::dataset::{CxrImage, Provenance};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::store::BlobStore;
use crate::{Error, Result};

pub const EVENT_LOG: &str = "events.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";
pub const DEFAULT_LOCK_TTL: Duration = Duration::from_secs(15 * 60);
pub const REJECT_ALL: &str = "REJECT_ALL";
const LABELS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn allows_reject_all(self) -> bool {
        self == Stage::Stage2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Locked,
    Completed,
    RejectedAll,
}

/// Where a candidate came from. Never leaves the server in a task payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenProvenance {
    pub provenance: Provenance,
    /// Model configuration label, or `manual`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub blinded_label: String,
    pub mask_ref: String,
    pub hidden_provenance: HiddenProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lock {
    pub reviewer_id: String,
    pub expiry: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub image_id: String,
    pub image_ref: String,
    pub stage: Stage,
    /// In blinded order: `candidates[i].blinded_label` is the i-th letter.
    pub candidates: Vec<Candidate>,
    pub permutation_seed: u64,
    pub status: TaskStatus,
    pub lock: Option<Lock>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Choice {
    Label(String),
    RejectAll,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Label(l) => f.write_str(l),
            Choice::RejectAll => f.write_str(REJECT_ALL),
        }
    }
}

impl FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == REJECT_ALL {
            Ok(Choice::RejectAll)
        } else if s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase() {
            Ok(Choice::Label(s.into()))
        } else {
            Err(Error::Invalid(format!("choice `{s}` is neither a candidate label nor {REJECT_ALL}")))
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub task_id: String,
    pub reviewer_id: String,
    pub choice: Choice,
    pub timestamp: i64,
}

/// A mask adopted as ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub mask_ref: String,
    pub provenance: Provenance,
    pub task_id: String,
    pub stage: Stage,
    pub reviewer_id: Option<String>,
    pub chosen_label: Option<String>,
    pub source: String,
    pub permutation_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FallbackEntry {
    pub task_id: String,
    pub resolved: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { seed: u64, lock_ttl_ms: i64 },
    TaskCreated { task: AnnotationTask },
    Locked { task_id: String, reviewer_id: String, expiry: i64, at: i64 },
    LockExpired { task_id: String, at: i64 },
    Selected { selection: Selection },
    FallbackResolved { image_id: String, mask_ref: String, at: i64 },
}

/// Everything the log determines. Serializes canonically (ordered maps,
/// fixed field order), which is what replay equality is checked on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub seed: u64,
    pub lock_ttl_ms: i64,
    pub events: u64,
    pub tasks: BTreeMap<String, AnnotationTask>,
    pub selections: BTreeMap<String, Selection>,
    pub ground_truth: BTreeMap<String, GroundTruth>,
    pub fallback: BTreeMap<String, FallbackEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub open: usize,
    pub locked: usize,
    pub completed: usize,
    pub rejected_all: usize,
    pub fallback_pending: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub label: String,
    pub mask_url: String,
}

/// What a reviewer sees: opaque ids and blinded labels only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub image_url: String,
    pub candidates: Vec<CandidatePayload>,
    pub stage: Stage,
    pub allow_reject_all: bool,
}

/// A candidate mask before it enters the store.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateInput {
    pub mask: Array2<f64>,
    pub provenance: Provenance,
    pub source: String,
}

/// `order[i]` is the canonical index shown under the i-th label.
pub fn blind_order(permutation_seed: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(permutation_seed));
    order
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CampaignState {
    fn task_mut(&mut self, id: &str) -> &mut AnnotationTask {
        self.tasks.get_mut(id).expect("events only name existing tasks")
    }

    /// Applies one event. Events are validated before they are logged, so
    /// this never fails.
    pub fn apply(&mut self, event: &Event) {
        self.events += 1;
        match event {
            Event::Created { seed, lock_ttl_ms } => {
                self.seed = *seed;
                self.lock_ttl_ms = *lock_ttl_ms;
            }
            Event::TaskCreated { task } => {
                self.tasks.insert(task.task_id.clone(), task.clone());
            }
            Event::Locked {
                task_id,
                reviewer_id,
                expiry,
                ..
            } => {
                let t = self.task_mut(task_id);
                t.status = TaskStatus::Locked;
                t.lock = Some(Lock {
                    reviewer_id: reviewer_id.clone(),
                    expiry: *expiry,
                });
            }
            Event::LockExpired { task_id, .. } => {
                let t = self.task_mut(task_id);
                t.status = TaskStatus::Open;
                t.lock = None;
            }
            Event::Selected { selection } => {
                let t = self.task_mut(&selection.task_id);
                t.lock = None;
                match &selection.choice {
                    Choice::RejectAll => {
                        t.status = TaskStatus::RejectedAll;
                        let (image_id, task_id) = (t.image_id.clone(), t.task_id.clone());
                        self.fallback.insert(image_id, FallbackEntry { task_id, resolved: None });
                    }
                    Choice::Label(label) => {
                        t.status = TaskStatus::Completed;
                        let c = t
                            .candidates
                            .iter()
                            .find(|c| &c.blinded_label == label)
                            .expect("validated label");
                        let gt = GroundTruth {
                            image_id: t.image_id.clone(),
                            mask_ref: c.mask_ref.clone(),
                            provenance: Provenance::Collaborative,
                            task_id: t.task_id.clone(),
                            stage: t.stage,
                            reviewer_id: Some(selection.reviewer_id.clone()),
                            chosen_label: Some(label.clone()),
                            source: c.hidden_provenance.source.clone(),
                            permutation_seed: t.permutation_seed,
                        };
                        self.ground_truth.insert(gt.image_id.clone(), gt);
                    }
                }
                self.selections.insert(selection.task_id.clone(), selection.clone());
            }
            Event::FallbackResolved { image_id, mask_ref, .. } => {
                let entry = self.fallback.get_mut(image_id).expect("validated fallback");
                entry.resolved = Some(mask_ref.clone());
                let t = &self.tasks[&entry.task_id];
                let gt = GroundTruth {
                    image_id: image_id.clone(),
                    mask_ref: mask_ref.clone(),
                    provenance: Provenance::Manual,
                    task_id: t.task_id.clone(),
                    stage: t.stage,
                    reviewer_id: None,
                    chosen_label: None,
                    source: "manual".into(),
                    permutation_seed: t.permutation_seed,
                };
                self.ground_truth.insert(image_id.clone(), gt);
            }
        }
    }

    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for t in self.tasks.values() {
            match t.status {
                TaskStatus::Open => p.open += 1,
                TaskStatus::Locked => p.locked += 1,
                TaskStatus::Completed => p.completed += 1,
                TaskStatus::RejectedAll => p.rejected_all += 1,
            }
        }
        p.fallback_pending = self.fallback.values().filter(|f| f.resolved.is_none()).count();
        p
    }

    /// Rebuilds the state from an event log alone.
    pub fn replay(log: &Path) -> Result<Self> {
        let mut state = Self::default();
        for (i, ev) in read_events(log)?.iter().enumerate() {
            state.validate_replayed(ev, i + 1)?;
            state.apply(ev);
        }
        Ok(state)
    }

    /// Cheap structural checks so a hand-edited log fails loudly instead of
    /// panicking in `apply`.
    fn validate_replayed(&self, ev: &Event, line: usize) -> Result<()> {
        let corrupt = |reason: String| Error::Corrupt { line, reason };
        match ev {
            Event::Created { .. } if self.events != 0 => Err(corrupt("campaign created twice".into())),
            Event::Created { .. } => Ok(()),
            _ if self.events == 0 => Err(corrupt("log does not start with a creation event".into())),
            Event::TaskCreated { task } if self.tasks.contains_key(&task.task_id) => {
                Err(corrupt(format!("task `{}` created twice", task.task_id)))
            }
            Event::Locked { task_id, .. } | Event::LockExpired { task_id, .. } if !self.tasks.contains_key(task_id) => {
                Err(corrupt(format!("unknown task `{task_id}`")))
            }
            Event::Selected { selection } => match self.tasks.get(&selection.task_id) {
                None => Err(corrupt(format!("unknown task `{}`", selection.task_id))),
                Some(t) => match &selection.choice {
                    Choice::Label(l) if !t.candidates.iter().any(|c| &c.blinded_label == l) => {
                        Err(corrupt(format!("task `{}` has no candidate `{l}`", t.task_id)))
                    }
                    _ => Ok(()),
                },
            },
            Event::FallbackResolved { image_id, .. } if !self.fallback.contains_key(image_id) => {
                Err(corrupt(format!("`{image_id}` is not in the fallback queue")))
            }
            _ => Ok(()),
        }
    }
}

pub fn read_events(log: &Path) -> Result<Vec<Event>> {
    let file = File::open(log)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CampaignOptions {
    pub seed: u64,
    pub lock_ttl: Duration,
    /// Write `snapshot.json` after this many events; 0 disables.
    pub snapshot_every: u64,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            lock_ttl: DEFAULT_LOCK_TTL,
            snapshot_every: 64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    state: CampaignState,
}

/// A campaign directory: `events.jsonl`, `snapshot.json`, `images/` and
/// `masks/`. Callers needing concurrent access wrap it in a mutex; that
/// single coordinator is what makes task assignment linearizable.
pub struct Campaign {
    dir: PathBuf,
    state: CampaignState,
    log: File,
    clock: Arc<dyn Clock>,
    snapshot_every: u64,
    images: BlobStore,
    masks: BlobStore,
}

impl fmt::Debug for Campaign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Campaign")
            .field("dir", &self.dir)
            .field("events", &self.state.events)
            .field("tasks", &self.state.tasks.len())
            .finish()
    }
}

impl Campaign {
    pub fn create(dir: impl Into<PathBuf>, opts: CampaignOptions, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let log_path = dir.join(EVENT_LOG);
        if log_path.exists() {
            return Err(Error::Conflict(format!("{} already holds a campaign", dir.display())));
        }
        let log = OpenOptions::new().create_new(true).append(true).open(&log_path)?;
        let mut c = Self {
            images: BlobStore::open(dir.join("images"))?,
            masks: BlobStore::open(dir.join("masks"))?,
            dir,
            state: CampaignState::default(),
            log,
            clock,
            snapshot_every: opts.snapshot_every,
        };
        c.emit(Event::Created {
            seed: opts.seed,
            lock_ttl_ms: opts.lock_ttl.as_millis() as i64,
        })?;
        Ok(c)
    }

    /// Reopens a campaign from its snapshot plus the events logged after it.
    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = dir.into();
        let log_path = dir.join(EVENT_LOG);
        let events = read_events(&log_path)?;
        let snap_path = dir.join(SNAPSHOT);
        let mut state = if snap_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snap_path)?)?;
            if snap.state.events as usize > events.len() {
                return Err(Error::Corrupt {
                    line: events.len(),
                    reason: format!("snapshot covers {} events but the log has {}", snap.state.events, events.len()),
                });
            }
            snap.state
        } else {
            CampaignState::default()
        };
        for (i, ev) in events.iter().enumerate().skip(state.events as usize) {
            state.validate_replayed(ev, i + 1)?;
            state.apply(ev);
        }
        let log = OpenOptions::new().append(true).open(&log_path)?;
        Ok(Self {
            images: BlobStore::open(dir.join("images"))?,
            masks: BlobStore::open(dir.join("masks"))?,
            dir,
            state,
            log,
            clock,
            snapshot_every: CampaignOptions::default().snapshot_every,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &CampaignState {
        &self.state
    }

    pub fn masks(&self) -> &BlobStore {
        &self.masks
    }

    pub fn images(&self) -> &BlobStore {
        &self.images
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.state.tasks.get(task_id)
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(EVENT_LOG)
    }

    fn emit(&mut self, event: Event) -> Result<()> {
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.state.apply(&event);
        if self.snapshot_every > 0 && self.state.events % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<()> {
        let tmp = self.dir.join(format!(".{SNAPSHOT}.tmp"));
        let snap = Snapshot {
            state: self.state.clone(),
        };
        fs::write(&tmp, serde_json::to_vec(&snap)?)?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        Ok(())
    }

    /// Adds one task. Candidates are given in canonical order; the blinded
    /// order is drawn from a per-task permutation seed recorded on the task.
    pub fn add_task(&mut self, image: &CxrImage, stage: Stage, candidates: Vec<CandidateInput>) -> Result<String> {
        if candidates.is_empty() || candidates.len() > LABELS.len() {
            return Err(Error::Invalid(format!("{} candidates; expected 1..={}", candidates.len(), LABELS.len())));
        }
        let manual = candidates.iter().filter(|c| c.provenance == Provenance::Manual).count();
        match stage {
            Stage::Stage1 if manual == 0 => return Err(Error::MissingManualMask(image.id.clone())),
            Stage::Stage2 if manual > 0 => {
                return Err(Error::Invalid(format!("stage2 task for `{}` carries a manual candidate", image.id)))
            }
            _ => {}
        }
        if let Some(c) = candidates.iter().find(|c| c.mask.dim() != image.pixels.dim()) {
            return Err(Error::Invalid(format!(
                "candidate from {} is {:?}, image `{}` is {:?}",
                c.source,
                c.mask.dim(),
                image.id,
                image.pixels.dim()
            )));
        }
        if self.state.tasks.values().any(|t| t.image_id == image.id) {
            return Err(Error::Conflict(format!("image `{}` already has a task", image.id)));
        }
        let n = self.state.tasks.len();
        let task_id = format!("t{n:05}");
        let permutation_seed = splitmix(self.state.seed ^ splitmix(n as u64));
        let image_ref = self.images.put_field(&image.pixels)?;
        let refs = candidates
            .iter()
            .map(|c| self.masks.put_field(&c.mask.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })))
            .collect::<Result<Vec<_>>>()?;
        let order = blind_order(permutation_seed, candidates.len());
        let blinded = order
            .iter()
            .enumerate()
            .map(|(i, &k)| Candidate {
                blinded_label: (LABELS[i] as char).to_string(),
                mask_ref: refs[k].clone(),
                hidden_provenance: HiddenProvenance {
                    provenance: candidates[k].provenance,
                    source: candidates[k].source.clone(),
                },
            })
            .collect();
        self.emit(Event::TaskCreated {
            task: AnnotationTask {
                task_id: task_id.clone(),
                image_id: image.id.clone(),
                image_ref,
                stage,
                candidates: blinded,
                permutation_seed,
                status: TaskStatus::Open,
                lock: None,
            },
        })?;
        Ok(task_id)
    }

    /// Reopens every task whose lock has run out.
    pub fn expire_locks(&mut self) -> Result<()> {
        let now = self.clock.now_ms();
        let stale: Vec<String> = self
            .state
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Locked && t.lock.as_ref().is_some_and(|l| l.expiry <= now))
            .map(|t| t.task_id.clone())
            .collect();
        for task_id in stale {
            self.emit(Event::LockExpired { task_id, at: now })?;
        }
        Ok(())
    }

    pub fn payload(&self, task_id: &str) -> Result<TaskPayload> {
        let t = self.task(task_id).ok_or_else(|| Error::NotFound(format!("task `{task_id}`")))?;
        Ok(TaskPayload {
            task_id: t.task_id.clone(),
            image_url: format!("/api/images/{}", t.image_ref),
            candidates: t
                .candidates
                .iter()
                .map(|c| CandidatePayload {
                    label: c.blinded_label.clone(),
                    mask_url: format!("/api/masks/{}", c.mask_ref),
                })
                .collect(),
            stage: t.stage,
            allow_reject_all: t.stage.allows_reject_all(),
        })
    }

    /// Hands the reviewer a task and locks it. A reviewer who already holds
    /// a live lock gets that task again (and the lock is extended).
    pub fn next_task(&mut self, reviewer_id: &str) -> Result<Option<TaskPayload>> {
        if reviewer_id.is_empty() {
            return Err(Error::Invalid("empty reviewer id".into()));
        }
        self.expire_locks()?;
        let held = self
            .state
            .tasks
            .values()
            .find(|t| t.lock.as_ref().is_some_and(|l| l.reviewer_id == reviewer_id))
            .map(|t| t.task_id.clone());
        let pick = held.or_else(|| {
            self.state
                .tasks
                .values()
                .find(|t| t.status == TaskStatus::Open)
                .map(|t| t.task_id.clone())
        });
        let Some(task_id) = pick else {
            return Ok(None);
        };
        self.lock(&task_id, reviewer_id)?;
        self.payload(&task_id).map(Some)
    }

    fn lock(&mut self, task_id: &str, reviewer_id: &str) -> Result<()> {
        let at = self.clock.now_ms();
        self.emit(Event::Locked {
            task_id: task_id.into(),
            reviewer_id: reviewer_id.into(),
            expiry: at + self.state.lock_ttl_ms,
            at,
        })
    }

    /// Extends a live lock held by this reviewer; returns the new expiry.
    pub fn renew_lock(&mut self, task_id: &str, reviewer_id: &str) -> Result<i64> {
        self.expire_locks()?;
        self.check_lock(task_id, reviewer_id)?;
        self.lock(task_id, reviewer_id)?;
        Ok(self.state.tasks[task_id].lock.as_ref().expect("just locked").expiry)
    }

    fn check_lock(&self, task_id: &str, reviewer_id: &str) -> Result<&AnnotationTask> {
        let t = self.task(task_id).ok_or_else(|| Error::NotFound(format!("task `{task_id}`")))?;
        match (t.status, &t.lock) {
            (TaskStatus::Completed | TaskStatus::RejectedAll, _) => {
                Err(Error::Conflict(format!("task `{task_id}` has already been decided")))
            }
            (TaskStatus::Locked, Some(l)) if l.reviewer_id == reviewer_id => Ok(t),
            (TaskStatus::Locked, _) => Err(Error::Conflict(format!("task `{task_id}` is locked by another reviewer"))),
            _ => Err(Error::Conflict(format!("reviewer `{reviewer_id}` holds no live lock on task `{task_id}`"))),
        }
    }

    pub fn submit_selection(&mut self, task_id: &str, reviewer_id: &str, choice: Choice) -> Result<TaskStatus> {
        self.expire_locks()?;
        let t = self.check_lock(task_id, reviewer_id)?;
        match &choice {
            Choice::RejectAll if !t.stage.allows_reject_all() => {
                return Err(Error::Invalid(format!("{REJECT_ALL} is not allowed on a {:?} task", t.stage)))
            }
            Choice::Label(l) if !t.candidates.iter().any(|c| &c.blinded_label == l) => {
                return Err(Error::Invalid(format!("task `{task_id}` has no candidate `{l}`")))
            }
            _ => {}
        }
        let selection = Selection {
            task_id: task_id.into(),
            reviewer_id: reviewer_id.into(),
            choice,
            timestamp: self.clock.now_ms(),
        };
        self.emit(Event::Selected { selection })?;
        Ok(self.state.tasks[task_id].status)
    }

    pub fn progress(&mut self) -> Result<Progress> {
        self.expire_locks()?;
        Ok(self.state.progress())
    }

    /// Images whose Stage II candidates were all rejected and that still
    /// need a manually drawn mask.
    pub fn fallback_pending(&self) -> Vec<String> {
        self.state
            .fallback
            .iter()
            .filter(|(_, f)| f.resolved.is_none())
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Imports a manually drawn mask for an image in the fallback queue.
    pub fn import_fallback(&mut self, image_id: &str, mask: &Array2<f64>) -> Result<()> {
        let entry = self
            .state
            .fallback
            .get(image_id)
            .ok_or_else(|| Error::NotFound(format!("`{image_id}` is not in the fallback queue")))?;
        if entry.resolved.is_some() {
            return Err(Error::Conflict(format!("`{image_id}` already has a fallback mask")));
        }
        let t = &self.state.tasks[&entry.task_id];
        let dim = self.masks.get_field(&t.candidates[0].mask_ref)?.dim();
        if mask.dim() != dim {
            return Err(Error::Invalid(format!("mask is {:?}, image `{image_id}` is {dim:?}", mask.dim())));
        }
        let mask_ref = self.masks.put_field(&mask.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))?;
        let at = self.clock.now_ms();
        self.emit(Event::FallbackResolved {
            image_id: image_id.into(),
            mask_ref,
            at,
        })
    }

    /// Candidate masks of a task in blinded order.
    pub fn candidate_masks(&self, task_id: &str) -> Result<Vec<Array2<f64>>> {
        let t = self.task(task_id).ok_or_else(|| Error::NotFound(format!("task `{task_id}`")))?;
        t.candidates.iter().map(|c| self.masks.get_field(&c.mask_ref)).collect()
    }

    /// Adopted ground-truth masks keyed by image id.
    pub fn ground_truth_masks(&self) -> Result<BTreeMap<String, Array2<f64>>> {
        self.state
            .ground_truth
            .values()
            .map(|g| Ok((g.image_id.clone(), self.masks.get_field(&g.mask_ref)?)))
            .collect()
    }
}
