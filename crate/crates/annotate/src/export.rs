//! Ground-truth archive: `masks/<stem>.png` (8-bit, 0 or 255) plus
//! `manifest.json` recording provenance, reviewer and permutation seed for
//! every exported mask, and the images still waiting for a manual mask.

use std::fs;
use std::path::Path;

use cxrinf_core::dataset::synth::file_stem;
use cxrinf_core::dataset::{Provenance, SegMask};
use cxrinf_core::pngio;
use serde::{Deserialize, Serialize};

use crate::campaign::{Campaign, Stage};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub file: String,
    pub provenance: Provenance,
    pub stage: Stage,
    pub task_id: String,
    pub reviewer_id: Option<String>,
    pub chosen_label: Option<String>,
    pub source: String,
    pub permutation_seed: u64,
    pub mask_ref: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub entries: Vec<ManifestEntry>,
    /// Rejected in Stage II with no manual mask imported yet.
    pub pending: Vec<String>,
}

pub fn export_ground_truth(campaign: &Campaign, out_dir: &Path) -> Result<ExportManifest> {
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&masks_dir)?;
    let mut entries = Vec::new();
    for gt in campaign.state().ground_truth.values() {
        let file = format!("masks/{}.png", file_stem(&gt.image_id));
        fs::write(out_dir.join(&file), campaign.masks().get_bytes(&gt.mask_ref)?)?;
        entries.push(ManifestEntry {
            image_id: gt.image_id.clone(),
            file,
            provenance: gt.provenance,
            stage: gt.stage,
            task_id: gt.task_id.clone(),
            reviewer_id: gt.reviewer_id.clone(),
            chosen_label: gt.chosen_label.clone(),
            source: gt.source.clone(),
            permutation_seed: gt.permutation_seed,
            mask_ref: gt.mask_ref.clone(),
        });
    }
    let manifest = ExportManifest {
        entries,
        pending: campaign.fallback_pending(),
    };
    fs::write(out_dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads an exported archive back into binary masks.
pub fn import_ground_truth(dir: &Path) -> Result<(ExportManifest, Vec<SegMask>)> {
    let manifest: ExportManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let masks = manifest
        .entries
        .iter()
        .map(|e| {
            let pixels = pngio::read_gray(&dir.join(&e.file))?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            Ok::<_, Error>(SegMask {
                image_id: e.image_id.clone(),
                pixels,
                provenance: e.provenance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, masks))
}
