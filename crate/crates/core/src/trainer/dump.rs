//! Prediction dumps: one 16-bit PNG per probability map plus a JSONL index.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::synth::file_stem;
use crate::dataset::Label;
use crate::infermap::ProbMask;
use crate::{pngio, Result};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub label: Option<Label>,
}

/// Writes `<stem>_prob.png` for every mask (value `round(p * 65535)`) and
/// an index line per entry.
pub fn write_prediction_dump(dir: &Path, items: &[(ProbMask, Option<usize>, Option<Label>)]) -> Result<Vec<DumpEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut index = std::fs::File::create(dir.join(INDEX_FILE))?;
    let mut entries = Vec::with_capacity(items.len());
    for (mask, fold, label) in items {
        let rel = PathBuf::from(format!("{}_prob.png", file_stem(&mask.image_id)));
        pngio::write_gray16(&dir.join(&rel), &mask.pixels)?;
        let e = DumpEntry {
            id: mask.image_id.clone(),
            path: rel,
            fold: *fold,
            label: *label,
        };
        serde_json::to_writer(&mut index, &e)?;
        index.write_all(b"\n")?;
        entries.push(e);
    }
    Ok(entries)
}

/// Reads a dump back; probabilities come back quantized to 1/65535.
pub fn read_prediction_dump(dir: &Path) -> Result<Vec<(DumpEntry, ProbMask)>> {
    let f = std::fs::File::open(dir.join(INDEX_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: DumpEntry = serde_json::from_str(&line)?;
        let pixels = pngio::read_gray(&dir.join(&e.path))?;
        let mask = ProbMask::new(&e.id, pixels)?;
        out.push((e, mask));
    }
    Ok(out)
}
