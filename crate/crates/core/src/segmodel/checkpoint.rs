//! Checkpoint archive: `CXRCKPT1`, a little-endian u32 header length, a JSON
//! header, then every tensor as little-endian f64.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, HeadKind, InitRecord, ModelConfig, ModelHandle};
use crate::nn::{AdamState, ParamGroup, ParamKind};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CXRCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub kind: ParamKind,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamEntry {
    pub step: u64,
    /// Per parameter, offsets of the first and second moments.
    pub slots: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub head: HeadKind,
    pub init: InitRecord,
    pub encoder_frozen: bool,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adam: Option<AdamEntry>,
    /// Free-form training metadata (epochs done, loss history, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Optimizer state carried alongside the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState,
    pub meta: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelHandle,
    pub training: Option<TrainingState>,
}

pub(crate) struct Decoded {
    pub header: CheckpointHeader,
    pub blob: Vec<f64>,
}

impl Decoded {
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Vec<usize>, &[f64])> {
        self.header
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.clone(), &self.blob[t.offset..t.offset + t.len()]))
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelHandle, training: Option<&TrainingState>) -> Result<()> {
    let mut blob: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            group: p.group,
            kind: p.kind,
            offset: blob.len(),
        });
        blob.extend_from_slice(&p.data);
    }
    let adam = training.map(|t| {
        let slots = (0..model.store.len())
            .map(|i| {
                let m = t.adam.m.get(i).filter(|m| !m.is_empty())?;
                let v = &t.adam.v[i];
                let om = blob.len();
                blob.extend_from_slice(m);
                let ov = blob.len();
                blob.extend_from_slice(v);
                Some((om, ov))
            })
            .collect();
        AdamEntry {
            step: t.adam.step,
            slots,
        }
    });
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        config: model.config.clone(),
        head: model.head,
        init: model.init.clone(),
        encoder_frozen: model.store.encoder_frozen(),
        tensors,
        adam,
        meta: training.map_or(serde_json::Value::Null, |t| t.meta.clone()),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + blob.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let raw = &bytes[12 + hlen..];
    if raw.len() % 8 != 0 {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let blob: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let in_range = |off: usize, len: usize| off.checked_add(len).is_some_and(|e| e <= blob.len());
    if let Some(t) = header.tensors.iter().find(|t| !in_range(t.offset, t.len())) {
        return Err(bad(format!("tensor `{}` runs past the end of the blob", t.name)));
    }
    Ok(Decoded { header, blob })
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&std::fs::read(path)?)?.header)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dec = decode(&std::fs::read(path)?)?;
    let header = dec.header.clone();
    let mut config = header.config.clone();
    config.pretrained = None;
    let mut model = build(&config, header.head)?;
    if model.store.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for (i, (name, shape, data)) in dec.tensors().enumerate() {
        let id = model.store.find(name).ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
        if id.index() != i {
            return Err(bad(format!("tensor `{name}` out of order")));
        }
        let p = model.store.get_mut(id);
        if p.shape != shape {
            return Err(Error::ShapeMismatch {
                expected: p.shape.clone(),
                got: shape,
            });
        }
        p.data.copy_from_slice(data);
    }
    model.config = header.config.clone();
    model.init = header.init.clone();
    model.set_encoder_frozen(header.encoder_frozen);
    let training = match &header.adam {
        None => None,
        Some(a) => {
            let lens: Vec<usize> = model.store.iter().map(|(_, p)| p.len()).collect();
            let mut adam = AdamState::new(model.store());
            adam.step = a.step;
            for (i, slot) in a.slots.iter().enumerate().take(lens.len()) {
                if let Some((om, ov)) = *slot {
                    let len = lens[i];
                    let (m, v) = dec
                        .blob
                        .get(om..om + len)
                        .zip(dec.blob.get(ov..ov + len))
                        .ok_or_else(|| bad("optimizer state runs past the end of the blob"))?;
                    adam.m[i] = m.to_vec();
                    adam.v[i] = v.to_vec();
                }
            }
            Some(TrainingState {
                adam,
                meta: header.meta.clone(),
            })
        }
    };
    Ok(Checkpoint {
        header,
        model,
        training,
    })
}
