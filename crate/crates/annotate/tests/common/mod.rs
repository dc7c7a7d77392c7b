#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use cxrinf_annotate::{Campaign, CampaignOptions, CandidateInput, ManualClock, Stage};
use cxrinf_core::dataset::{CxrImage, Label, Provenance, SourceFormat};
use ndarray::Array2;

pub fn image(id: &str, k: usize) -> CxrImage {
    CxrImage {
        id: id.into(),
        pixels: Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x + 3 * k) % 17) as f64 / 16.0),
        source: "test".into(),
        label: Label::Covid,
        original_format: SourceFormat::Png,
    }
}

pub fn square(at: usize, side: usize) -> Array2<f64> {
    Array2::from_shape_fn((16, 16), |(y, x)| (y >= at && y < at + side && x >= at && x < at + side) as u8 as f64)
}

/// Candidates whose sources carry every provenance word a leak could show.
pub fn candidates(stage: Stage, k: usize) -> Vec<CandidateInput> {
    let sources = ["manual", "unet-densenet121", "unetpp-densenet121", "dla-densenet121", "unet-chexnet"];
    let n = if stage == Stage::Stage1 { 4 } else { 5 };
    (0..n)
        .map(|i| {
            let manual = stage == Stage::Stage1 && i == 0;
            CandidateInput {
                mask: square((k + i) % 6, 4 + i),
                provenance: if manual { Provenance::Manual } else { Provenance::Model },
                source: if manual { sources[0].into() } else { sources[i.max(1)].into() },
            }
        })
        .collect()
}

/// `n1` Stage I tasks followed by `n2` Stage II tasks.
pub fn campaign(dir: &Path, clock: Arc<ManualClock>, n1: usize, n2: usize) -> Campaign {
    let mut c = Campaign::create(
        dir,
        CampaignOptions {
            seed: 17,
            ..Default::default()
        },
        clock,
    )
    .unwrap();
    for k in 0..n1 + n2 {
        let stage = if k < n1 { Stage::Stage1 } else { Stage::Stage2 };
        c.add_task(&image(&format!("covid/case-{k:03}"), k), stage, candidates(stage, k)).unwrap();
    }
    c
}

/// Words that must never reach a reviewer.
pub const PROVENANCE_TOKENS: &[&str] = &[
    "manual",
    "model",
    "collaborative",
    "provenance",
    "source",
    "unet",
    "dla",
    "densenet",
    "chexnet",
    "resnet",
    "inception",
    "covid",
    "case-",
];
