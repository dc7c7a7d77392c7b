use std::collections::HashSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{dicom, Catalog, CatalogRow, CxrImage, Label, SourceFormat};
use crate::{exec, pngio, Error, Result};

/// A file that could not be decoded. Ingestion continues past these.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub images: Vec<CxrImage>,
    pub rows: Vec<CatalogRow>,
    pub errors: Vec<IngestError>,
}

fn format_of(path: &Path) -> Option<SourceFormat> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(SourceFormat::Png),
        "jpg" | "jpeg" => Some(SourceFormat::Jpeg),
        "dcm" | "dicom" => Some(SourceFormat::DicomSubset),
        _ => None,
    }
}

fn decode_file(path: &Path) -> std::result::Result<(SourceFormat, ndarray::Array2<f64>, String), String> {
    let format = format_of(path).ok_or_else(|| "unsupported file extension".to_string())?;
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let sha = hex::encode(Sha256::digest(&bytes));
    let field = match format {
        SourceFormat::DicomSubset => dicom::decode(&bytes)?,
        SourceFormat::Png | SourceFormat::Jpeg => {
            let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
            pngio::dynamic_to_field(&img)
        }
    };
    Ok((format, field, sha))
}

/// Reads every regular, non-hidden file directly under `path` as a
/// radiograph of class `label`. Ids are `<source_tag>/<file stem>`.
///
/// Rows are appended to `catalog`; an id already present there (or repeated
/// within `path`) aborts the whole call. Files whose content hash matches an
/// earlier row are kept and flagged through `duplicate_of`.
pub fn ingest_source(path: &Path, label: Label, source_tag: &str, catalog: &mut Catalog) -> Result<IngestReport> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    files.sort();

    let mut seen = HashSet::new();
    for f in &files {
        let id = image_id(source_tag, f);
        if !seen.insert(id.clone()) || catalog.contains(&id) {
            return Err(Error::DuplicateId(id));
        }
    }

    let decoded = exec::map(&files, |f| decode_file(f));
    let mut report = IngestReport::default();
    let mut batch_hashes: Vec<(String, String)> = Vec::new();
    for (file, result) in files.iter().zip(decoded) {
        match result {
            Ok((format, pixels, sha)) => {
                let id = image_id(source_tag, file);
                let duplicate_of = catalog
                    .duplicate_of(&sha)
                    .map(str::to_string)
                    .or_else(|| batch_hashes.iter().find(|(h, _)| *h == sha).map(|(_, i)| i.clone()));
                if let Some(orig) = &duplicate_of {
                    log::warn!("{id}: identical content to {orig}");
                }
                batch_hashes.push((sha.clone(), id.clone()));
                report.rows.push(CatalogRow {
                    id: id.clone(),
                    path: file.display().to_string(),
                    label,
                    source: source_tag.to_string(),
                    width: pixels.ncols(),
                    height: pixels.nrows(),
                    sha256: sha,
                    duplicate_of,
                });
                report.images.push(CxrImage {
                    id,
                    pixels,
                    source: source_tag.to_string(),
                    label,
                    original_format: format,
                });
            }
            Err(reason) => report.errors.push(IngestError {
                path: file.clone(),
                reason,
            }),
        }
    }
    catalog.append(&report.rows)?;
    Ok(report)
}

fn image_id(source_tag: &str, file: &Path) -> String {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("unnamed");
    format!("{source_tag}/{stem}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn empty_directory_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::in_memory();
        let r = ingest_source(dir.path(), Label::Covid, "s", &mut cat).unwrap();
        assert!(r.images.is_empty() && r.errors.is_empty());
    }

    #[test]
    fn corrupt_file_is_recorded_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..2 {
            GrayImage::from_pixel(64, 64, Luma([128u8]))
                .save(dir.path().join(format!("img{i}.png")))
                .unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"\x89PNG garbage").unwrap();
        let mut cat = Catalog::in_memory();
        let r = ingest_source(dir.path(), Label::Covid, "s", &mut cat).unwrap();
        assert_eq!(r.images.len(), 2);
        assert_eq!(r.errors.len(), 1);
        assert!(r.errors[0].path.ends_with("broken.png"));
        for img in &r.images {
            assert!(img.pixels.iter().all(|&p| (p - 128.0 / 255.0).abs() < 1e-12));
            assert!((img.pixels[[0, 0]] - 0.50196).abs() < 1e-5);
        }
        // identical content is flagged, not removed
        assert_eq!(r.rows[1].duplicate_of.as_deref(), Some("s/img0"));
        assert_eq!(cat.rows().len(), 2);
    }

    #[test]
    fn duplicate_ids_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_pixel(8, 8, Luma([1u8])).save(dir.path().join("a.png")).unwrap();
        GrayImage::from_pixel(8, 8, Luma([2u8])).save(dir.path().join("a.jpg")).unwrap();
        let mut cat = Catalog::in_memory();
        assert!(matches!(
            ingest_source(dir.path(), Label::Control, "s", &mut cat),
            Err(Error::DuplicateId(id)) if id == "s/a"
        ));
    }

    #[test]
    fn reads_dicom_subset_and_persists_catalog() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u16> = vec![65535; 16];
        std::fs::write(dir.path().join("scan.dcm"), dicom::encode_monochrome16(4, 4, &px)).unwrap();
        let cat_path = dir.path().join("meta").join("catalog.jsonl");
        let mut cat = Catalog::open(&cat_path).unwrap();
        let r = ingest_source(dir.path(), Label::Control, "dcm", &mut cat).unwrap();
        assert_eq!(r.images.len(), 1);
        assert_eq!(r.images[0].original_format, SourceFormat::DicomSubset);
        assert!(r.images[0].pixels.iter().all(|&p| p == 1.0));
        let reopened = Catalog::open(&cat_path).unwrap();
        assert_eq!(reopened.rows(), cat.rows());
        // second ingest of the same directory collides on ids
        assert!(ingest_source(dir.path(), Label::Control, "dcm", &mut cat).is_err());
    }
}
