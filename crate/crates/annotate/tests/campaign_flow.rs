mod common;

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use common::{campaign, candidates, PROVENANCE_TOKENS};
use cxrinf_annotate::campaign::CampaignState;
use cxrinf_annotate::reviewer::iou;
use cxrinf_annotate::{
    create_stage1, create_stage2, default_stage1_configs, default_stage2_configs, export_ground_truth, import_ground_truth,
    run_scripted, Campaign, CampaignOptions, Choice, Error, ManualClock, OracleReviewer, RandomReviewer, Reviewer, Stage,
    StageOptions,
};
use cxrinf_core::dataset::synth::{disk_corpus, SynthConfig};
use cxrinf_core::dataset::{Provenance, Sample};
use cxrinf_core::segmodel::Scale;
use cxrinf_core::trainer::TrainConfig;

#[test]
fn every_payload_is_blind() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = campaign(dir.path(), Arc::new(ManualClock::new(0)), 6, 6);
    let mut n = 0;
    while let Some(p) = c.next_task(&format!("r{n}")).unwrap() {
        let text = serde_json::to_string(&p).unwrap().to_lowercase();
        for tok in PROVENANCE_TOKENS {
            assert!(!text.contains(tok), "`{tok}` in {text}");
        }
        n += 1;
    }
    assert_eq!(n, 12);
}

#[test]
fn threads_polling_together_get_distinct_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let c = Arc::new(Mutex::new(campaign(dir.path(), Arc::new(ManualClock::new(0)), 16, 0)));
    let handles: Vec<_> = (0..4)
        .map(|r| {
            let c = c.clone();
            std::thread::spawn(move || {
                let mut got = Vec::new();
                loop {
                    // bind first: a guard in the `while let` scrutinee lives through the body
                    let next = c.lock().unwrap().next_task(&format!("r{r}")).unwrap();
                    let Some(p) = next else { break };
                    got.push(p.task_id.clone());
                    c.lock()
                        .unwrap()
                        .submit_selection(&p.task_id, &format!("r{r}"), Choice::Label("A".into()))
                        .unwrap();
                }
                got
            })
        })
        .collect();
    let all: Vec<String> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(all.len(), 16);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 16);
}

#[test]
fn export_round_trip_and_pending_list() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let mut c = campaign(dir.path(), clock, 4, 3);
    let mut reject_first = RandomReviewer::new("rand", 5, 0.0);
    // one Stage II rejection, everything else picked at random
    let mut done = 0;
    while let Some(p) = c.next_task("rand").unwrap() {
        let choice = if p.stage == Stage::Stage2 && done == 4 {
            Choice::RejectAll
        } else {
            let masks = c.candidate_masks(&p.task_id).unwrap();
            reject_first.choose("", &p, &masks)
        };
        c.submit_selection(&p.task_id, "rand", choice).unwrap();
        done += 1;
    }
    let out = tempfile::tempdir().unwrap();
    let manifest = export_ground_truth(&c, out.path()).unwrap();
    assert_eq!(manifest.entries.len(), 6);
    assert_eq!(manifest.pending.len(), 1);
    assert!(manifest.entries.iter().all(|e| e.provenance == Provenance::Collaborative));
    assert!(manifest.entries.iter().all(|e| e.reviewer_id.as_deref() == Some("rand")));
    let (_, masks) = import_ground_truth(out.path()).unwrap();
    let stored = c.ground_truth_masks().unwrap();
    assert_eq!(masks.len(), 6);
    for m in &masks {
        assert!(m.is_binary());
        assert_eq!(m.pixels, stored[&m.image_id], "{}", m.image_id);
    }

    let pending = manifest.pending[0].clone();
    c.import_fallback(&pending, &common::square(2, 3)).unwrap();
    let manifest = export_ground_truth(&c, out.path()).unwrap();
    assert_eq!(manifest.entries.len(), 7);
    assert!(manifest.pending.is_empty());
    let e = manifest.entries.iter().find(|e| e.image_id == pending).unwrap();
    assert_eq!(e.provenance, Provenance::Manual);
    assert_eq!(e.reviewer_id, None);
}

#[test]
fn oracle_never_does_worse_than_the_manual_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = campaign(dir.path(), Arc::new(ManualClock::new(0)), 10, 0);
    // hidden truth: a mix of candidate shapes, so sometimes a model mask wins
    let truth: HashMap<String, _> = (0..10)
        .map(|k| (format!("covid/case-{k:03}"), common::square((k + k % 3) % 6, 4 + k % 4)))
        .collect();
    let manual_iou: f64 = (0..10)
        .map(|k| iou(&candidates(Stage::Stage1, k)[0].mask, &truth[&format!("covid/case-{k:03}")]))
        .sum::<f64>()
        / 10.0;
    let mut oracle = OracleReviewer {
        id: "oracle".into(),
        truth: truth.clone(),
        reject_below: None,
    };
    let run = run_scripted(&mut c, &mut [&mut oracle]).unwrap();
    assert_eq!(run.completed, 10);
    let gt = c.ground_truth_masks().unwrap();
    let collab_iou: f64 = gt.iter().map(|(id, m)| iou(m, &truth[id])).sum::<f64>() / 10.0;
    assert!(collab_iou >= manual_iou, "{collab_iou} < {manual_iou}");
    assert!(collab_iou > manual_iou, "fixture should let a model candidate win somewhere");
}

#[test]
fn replay_after_mixed_activity_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let mut c = campaign(dir.path(), clock.clone(), 5, 5);
    let mut a = RandomReviewer::new("a", 1, 0.5);
    let mut b = RandomReviewer::new("b", 2, 0.5);
    c.next_task("idle").unwrap();
    clock.advance(cxrinf_annotate::DEFAULT_LOCK_TTL);
    run_scripted(&mut c, &mut [&mut a, &mut b]).unwrap();
    let live = c.state().canonical_json();
    assert_eq!(CampaignState::replay(&c.log_path()).unwrap().canonical_json(), live);
    drop(c);
    assert_eq!(Campaign::open(dir.path(), clock).unwrap().state().canonical_json(), live);
}

fn tiny_training() -> StageOptions {
    StageOptions {
        train: TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::segmentation()
        },
        fold_k: 5,
        seed: 3,
        ..Default::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Sample> {
    disk_corpus(&SynthConfig {
        n,
        size: 32,
        seed,
        ..Default::default()
    })
}

fn desk(configs: Vec<cxrinf_core::segmodel::ModelConfig>) -> Vec<cxrinf_core::segmodel::ModelConfig> {
    configs
        .into_iter()
        .map(|mut c| {
            c.input_size = 32;
            c
        })
        .collect()
}

#[test]
fn stage1_requires_manual_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), CampaignOptions::default(), Arc::new(ManualClock::new(0))).unwrap();
    let mut subset = corpus(6, 1);
    subset[4].mask = None;
    let err = create_stage1(&mut c, &subset, &desk(default_stage1_configs(Scale::Desk)), &tiny_training()).unwrap_err();
    assert!(matches!(&err, Error::MissingManualMask(id) if id == &subset[4].image.id), "{err}");
    assert!(c.state().tasks.is_empty());
}

#[test]
fn both_stages_build_the_expected_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), CampaignOptions::default(), Arc::new(ManualClock::new(0))).unwrap();
    let subset = corpus(10, 1);
    let ids = create_stage1(&mut c, &subset, &desk(default_stage1_configs(Scale::Desk)), &tiny_training()).unwrap();
    assert_eq!(ids.len(), 10);
    for id in &ids {
        let t = c.task(id).unwrap();
        assert_eq!(t.stage, Stage::Stage1);
        assert_eq!(t.candidates.len(), 4);
        let manual = t
            .candidates
            .iter()
            .filter(|c| c.hidden_provenance.provenance == Provenance::Manual)
            .count();
        assert_eq!(manual, 1);
        let sources: HashSet<_> = t.candidates.iter().map(|c| c.hidden_provenance.source.as_str()).collect();
        assert_eq!(sources.len(), 4);
    }
    let mut oracle = OracleReviewer {
        id: "o".into(),
        truth: subset
            .iter()
            .map(|s| (s.image.id.clone(), s.mask.clone().unwrap().pixels))
            .collect(),
        reject_below: None,
    };
    run_scripted(&mut c, &mut [&mut oracle]).unwrap();
    let gt = c.ground_truth_masks().unwrap();
    let collab: Vec<Sample> = subset
        .iter()
        .map(|s| Sample {
            image: s.image.clone(),
            mask: Some(cxrinf_core::dataset::SegMask {
                image_id: s.image.id.clone(),
                pixels: gt[&s.image.id].clone(),
                provenance: Provenance::Collaborative,
            }),
        })
        .collect();
    let unannotated: Vec<_> = corpus(13, 2)[10..].iter().map(|s| s.image.clone()).collect();
    let ids = create_stage2(&mut c, &collab, &unannotated, &desk(default_stage2_configs(Scale::Desk)), &tiny_training()).unwrap();
    assert_eq!(ids.len(), 3);
    for id in &ids {
        let t = c.task(id).unwrap();
        assert_eq!(t.stage, Stage::Stage2);
        assert_eq!(t.candidates.len(), 5);
        assert!(t.candidates.iter().all(|c| c.hidden_provenance.provenance == Provenance::Model));
    }
}
