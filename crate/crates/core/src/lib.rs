//! Chest X-ray infection mapping.
//!
//! The crate covers the numerical side of the toolkit: radiograph ingestion
//! and fold planning ([`dataset`]), the focal + dice objective ([`losses`]),
//! a small reverse-mode CNN engine ([`nn`]) with the encoder-decoder grid built
//! on top of it ([`segmodel`]), training loops ([`trainer`]), infection-map
//! rendering and the detection rule ([`infermap`]), the evaluation suite
//! ([`metrics`]) and Grad-CAM activation maps ([`gradcam`]).
//!
//! Data-parallel inner loops go through [`exec`], which dispatches to rayon
//! when the `parallel` feature is enabled (the default) and to plain
//! iterators otherwise. Results are bit-identical either way.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcam;
pub mod infermap;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pngio;
pub mod segmodel;
pub mod trainer;

pub use error::{Error, Result};
