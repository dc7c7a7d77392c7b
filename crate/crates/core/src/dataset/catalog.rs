use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Label;
use crate::{Error, Result};

/// One line of the catalog file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub source: String,
    pub width: usize,
    pub height: usize,
    pub sha256: String,
    /// Earlier row with identical file content, if any. Flagged, never
    /// dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

/// Line-delimited JSON catalog. One writer appends; readers reopen.
#[derive(Debug, Default)]
pub struct Catalog {
    path: Option<PathBuf>,
    rows: Vec<CatalogRow>,
    by_hash: HashMap<String, String>,
}

impl Catalog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first append) the catalog at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut cat = Catalog {
            path: Some(path.clone()),
            ..Default::default()
        };
        if path.exists() {
            for (lineno, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: CatalogRow = serde_json::from_str(&line).map_err(|e| Error::Decode {
                    path: path.clone(),
                    reason: format!("line {}: {e}", lineno + 1),
                })?;
                cat.index(&row);
                cat.rows.push(row);
            }
        }
        Ok(cat)
    }

    fn index(&mut self, row: &CatalogRow) {
        self.by_hash.entry(row.sha256.clone()).or_insert_with(|| row.id.clone());
    }

    pub fn rows(&self) -> &[CatalogRow] {
        &self.rows
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.iter().any(|r| r.id == id)
    }

    pub fn duplicate_of(&self, sha256: &str) -> Option<&str> {
        self.by_hash.get(sha256).map(String::as_str)
    }

    /// Appends rows, persisting them if the catalog is file-backed.
    pub fn append(&mut self, rows: &[CatalogRow]) -> Result<()> {
        for r in rows {
            if self.contains(&r.id) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            for r in rows {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
        }
        for r in rows {
            self.index(r);
            self.rows.push(r.clone());
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// `(id, label)` pairs for fold planning.
    pub fn labels(&self) -> Vec<(String, Label)> {
        self.rows.iter().map(|r| (r.id.clone(), r.label)).collect()
    }
}
