//! Collaborative ground-truth campaigns.
//!
//! A campaign is a set of blinded annotation tasks. Stage I tasks offer a
//! reviewer the manual mask of an image next to cross-validated model
//! predictions; Stage II tasks offer only model predictions and allow the
//! reviewer to reject them all, which routes the image to a manual-fallback
//! queue. Every state change is an event appended to `events.jsonl` before it
//! is applied, so replaying the log rebuilds the exact same state.
//!
//! The [`http`] module exposes the queue to the review UI.

pub mod campaign;
pub mod clock;
pub mod error;
pub mod export;
pub mod http;
pub mod reviewer;
pub mod stages;
pub mod store;

pub use campaign::{DEFAULT_LOCK_TTL, REJECT_ALL, 
    AnnotationTask, Campaign, CampaignOptions, CampaignState, Candidate, CandidateInput, Choice, Event, HiddenProvenance,
    Lock, Progress, Selection, Stage, TaskPayload, TaskStatus,
};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{Error, Result};
pub use export::{export_ground_truth, import_ground_truth, ExportManifest};
pub use reviewer::{run_scripted, OracleReviewer, RandomReviewer, Reviewer, ScriptedRun};
pub use stages::{create_stage1, create_stage2, default_stage1_configs, default_stage2_configs, StageOptions};
