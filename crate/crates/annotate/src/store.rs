//! Content-addressed PNG store. A blob's reference is the SHA-256 of its
//! encoded bytes, so identical masks share one file and references reveal
//! nothing about where a mask came from.

use std::fs;
use std::path::{Path, PathBuf};

use cxrinf_core::pngio;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct BlobStore {
    dir: PathBuf,
}

pub fn is_valid_ref(r: &str) -> bool {
    r.len() == 64 && r.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, r: &str) -> Result<PathBuf> {
        if !is_valid_ref(r) {
            return Err(Error::NotFound(format!("blob `{r}`")));
        }
        Ok(self.dir.join(format!("{r}.png")))
    }

    /// Stores a `[0, 1]` field as 8-bit PNG and returns its reference.
    pub fn put_field(&self, field: &Array2<f64>) -> Result<String> {
        let bytes = pngio::encode_gray8(field)?;
        let r = hex::encode(Sha256::digest(&bytes));
        let path = self.path(&r)?;
        if !path.exists() {
            let tmp = self.dir.join(format!(".{r}.tmp"));
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(r)
    }

    pub fn get_bytes(&self, r: &str) -> Result<Vec<u8>> {
        let path = self.path(r)?;
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("blob `{r}`")),
            _ => e.into(),
        })
    }

    pub fn get_field(&self, r: &str) -> Result<Array2<f64>> {
        Ok(pngio::decode_gray(&self.get_bytes(r)?)?)
    }
}
