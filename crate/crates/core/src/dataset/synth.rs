//! Synthetic disk-on-noise corpus used for desk-scale training and tests.
//!
//! COVID-labelled samples carry one to three bright disks whose union is
//! the ground-truth mask; control samples are noise only.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogRow, CxrImage, Label, Provenance, Sample, SegMask, SourceFormat};
use crate::{pngio, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Fraction of samples that carry disks.
    pub covid_fraction: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_disks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 8,
            size: 64,
            seed: 0,
            covid_fraction: 1.0,
            min_radius: 5.0,
            max_radius: 11.0,
            max_disks: 3,
        }
    }
}

/// One sample; `i` selects its own RNG stream so samples are independent
/// of `n`.
pub fn disk_sample(cfg: &SynthConfig, i: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1));
    let covid = (i as f64 + 0.5) / cfg.n.max(1) as f64 <= cfg.covid_fraction;
    let s = cfg.size;
    let mut pixels = Array2::from_shape_fn((s, s), |_| 0.25 + 0.2 * rng.random::<f64>());
    let mut mask = Array2::<f64>::zeros((s, s));
    if covid {
        let disks = rng.random_range(1..=cfg.max_disks.max(1));
        for _ in 0..disks {
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let cy = rng.random_range(r..s as f64 - r);
            let cx = rng.random_range(r..s as f64 - r);
            for y in 0..s {
                for x in 0..s {
                    if (y as f64 - cy).hypot(x as f64 - cx) <= r {
                        mask[[y, x]] = 1.0;
                    }
                }
            }
        }
        ndarray::Zip::from(&mut pixels)
            .and(&mask)
            .for_each(|p, &m| *p = (*p + 0.4 * m).min(1.0));
    }
    let id = format!("synth/{i:05}");
    Sample {
        image: CxrImage {
            id: id.clone(),
            pixels,
            source: "synth".into(),
            label: if covid { Label::Covid } else { Label::Control },
            original_format: SourceFormat::Png,
        },
        mask: Some(SegMask {
            image_id: id,
            pixels: mask,
            provenance: Provenance::Manual,
        }),
    }
}

pub fn disk_corpus(cfg: &SynthConfig) -> Vec<Sample> {
    (0..cfg.n).map(|i| disk_sample(cfg, i)).collect()
}

/// Writes `images/<n>.png` (16-bit), `masks/<n>.png` (8-bit) and
/// `catalog.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<Vec<CatalogRow>> {
    use sha2::{Digest, Sha256};
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let catalog_path = dir.join("catalog.jsonl");
    if catalog_path.exists() {
        std::fs::remove_file(&catalog_path)?;
    }
    let mut catalog = Catalog::open(&catalog_path)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = file_stem(&s.image.id);
        let img_path = dir.join("images").join(format!("{stem}.png"));
        pngio::write_gray16(&img_path, &s.image.pixels)?;
        if let Some(m) = &s.mask {
            pngio::write_gray8(&dir.join("masks").join(format!("{stem}.png")), &m.pixels)?;
        }
        let bytes = std::fs::read(&img_path)?;
        rows.push(CatalogRow {
            id: s.image.id.clone(),
            path: format!("images/{stem}.png"),
            label: s.image.label,
            source: s.image.source.clone(),
            width: s.image.width(),
            height: s.image.height(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            duplicate_of: None,
        });
    }
    catalog.append(&rows)?;
    Ok(rows)
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let catalog = Catalog::open(dir.join("catalog.jsonl"))?;
    let mut out = Vec::new();
    for row in catalog.rows() {
        let pixels = pngio::read_gray(&dir.join(&row.path))?;
        let stem = file_stem(&row.id);
        let mask_path = dir.join("masks").join(format!("{stem}.png"));
        let mask = if mask_path.exists() {
            Some(SegMask {
                image_id: row.id.clone(),
                pixels: pngio::read_gray(&mask_path)?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
                provenance: Provenance::Manual,
            })
        } else {
            None
        };
        out.push(Sample {
            image: CxrImage {
                id: row.id.clone(),
                pixels,
                source: row.source.clone(),
                label: row.label,
                original_format: SourceFormat::Png,
            },
            mask,
        });
    }
    Ok(out)
}

/// File-system-safe stem for an id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
