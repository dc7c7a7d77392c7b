//! Radiograph ingestion, resampling, fold planning and augmentation.

mod augment;
mod catalog;
pub mod dicom;
mod folds;
mod ingest;
mod resample;
pub mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, balance_training_set, warp_field, AugmentParams, FillMode, Transform};
pub use catalog::{Catalog, CatalogRow};
pub use folds::{make_folds, FoldPlan};
pub use ingest::{ingest_source, IngestError, IngestReport};
pub use resample::{normalize, resize_bilinear, sample_clamped};

pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Covid,
    Control,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::Control => "control",
        }
    }

    /// Class index used by the two-way classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Covid => 1,
        }
    }
}

impl std::str::FromStr for Label {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "covid" => Ok(Label::Covid),
            "control" => Ok(Label::Control),
            other => Err(crate::Error::invalid("label", format!("unknown class `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Png,
    Jpeg,
    DicomSubset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Model,
    Collaborative,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::Model => "model",
            Provenance::Collaborative => "collaborative",
        }
    }
}

/// Grayscale radiograph with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CxrImage {
    pub id: String,
    pub pixels: Array2<f64>,
    pub source: String,
    pub label: Label,
    pub original_format: SourceFormat,
}

impl CxrImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Binary segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub image_id: String,
    pub pixels: Array2<f64>,
    pub provenance: Provenance,
}

impl SegMask {
    /// Thresholds a probability field at `threshold` (inclusive).
    pub fn from_probabilities(image_id: impl Into<String>, field: &Array2<f64>, threshold: f64, provenance: Provenance) -> Self {
        Self {
            image_id: image_id.into(),
            pixels: field.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            provenance,
        }
    }

    pub fn positive_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// An image, its label (carried by the image) and an optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: CxrImage,
    pub mask: Option<SegMask>,
}

impl Sample {
    pub fn label(&self) -> Label {
        self.image.label
    }
}
