//! Scripted reviewers for unattended campaigns.

use std::collections::HashMap;

use cxrinf_core::dataset::{Provenance, SegMask};
use cxrinf_core::metrics::mask_iou;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::campaign::{Campaign, Choice, TaskPayload, TaskStatus};
use crate::Result;

pub trait Reviewer {
    fn id(&self) -> &str;

    /// `masks` follows the payload's candidate order. `image_id` lets a
    /// scripted reviewer look up its own hidden references.
    fn choose(&mut self, image_id: &str, task: &TaskPayload, masks: &[Array2<f64>]) -> Choice;
}

/// IoU of two binary fields; 0 on a shape mismatch.
pub fn iou(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let wrap = |p: &Array2<f64>| SegMask {
        image_id: String::new(),
        pixels: p.clone(),
        provenance: Provenance::Model,
    };
    mask_iou(&wrap(a), &wrap(b)).unwrap_or(0.0)
}

/// Picks the candidate with the highest IoU against a hidden truth, the
/// earliest label on ties. With `reject_below` set it rejects a Stage II
/// task whose best candidate scores under that IoU.
pub struct OracleReviewer {
    pub id: String,
    pub truth: HashMap<String, Array2<f64>>,
    pub reject_below: Option<f64>,
}

impl Reviewer for OracleReviewer {
    fn id(&self) -> &str {
        &self.id
    }

    fn choose(&mut self, image_id: &str, task: &TaskPayload, masks: &[Array2<f64>]) -> Choice {
        let Some(truth) = self.truth.get(image_id) else {
            return Choice::Label(task.candidates[0].label.clone());
        };
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, m) in masks.iter().enumerate() {
            let iou = iou(m, truth);
            if iou > best.0 {
                best = (iou, i);
            }
        }
        match self.reject_below {
            Some(t) if task.allow_reject_all && best.0 < t => Choice::RejectAll,
            _ => Choice::Label(task.candidates[best.1].label.clone()),
        }
    }
}

/// Picks uniformly at random; rejects with probability `reject_probability`
/// when the task allows it.
pub struct RandomReviewer {
    pub id: String,
    pub rng: ChaCha8Rng,
    pub reject_probability: f64,
}

impl RandomReviewer {
    pub fn new(id: impl Into<String>, seed: u64, reject_probability: f64) -> Self {
        Self {
            id: id.into(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            reject_probability,
        }
    }
}

impl Reviewer for RandomReviewer {
    fn id(&self) -> &str {
        &self.id
    }

    fn choose(&mut self, _image_id: &str, task: &TaskPayload, _masks: &[Array2<f64>]) -> Choice {
        if task.allow_reject_all && self.rng.random::<f64>() < self.reject_probability {
            return Choice::RejectAll;
        }
        let i = self.rng.random_range(0..task.candidates.len());
        Choice::Label(task.candidates[i].label.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScriptedRun {
    pub completed: usize,
    pub rejected_all: usize,
}

/// Lets the reviewers take turns until the queue is empty.
pub fn run_scripted(campaign: &mut Campaign, reviewers: &mut [&mut dyn Reviewer]) -> Result<ScriptedRun> {
    let mut run = ScriptedRun::default();
    if reviewers.is_empty() {
        return Ok(run);
    }
    let mut idle = 0;
    let mut turn = 0;
    while idle < reviewers.len() {
        let r = &mut reviewers[turn % reviewers.len()];
        turn += 1;
        let Some(payload) = campaign.next_task(r.id())? else {
            idle += 1;
            continue;
        };
        idle = 0;
        let image_id = campaign.task(&payload.task_id).expect("payload task exists").image_id.clone();
        let masks = campaign.candidate_masks(&payload.task_id)?;
        let choice = r.choose(&image_id, &payload, &masks);
        match campaign.submit_selection(&payload.task_id, r.id(), choice)? {
            TaskStatus::RejectedAll => run.rejected_all += 1,
            _ => run.completed += 1,
        }
    }
    Ok(run)
}
