//! Segmentation models (3 decoder families x 4 encoders) and the 2-way
//! classifier used for Grad-CAM, with checkpointing.

mod checkpoint;
mod decoder;
mod encoder;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::CxrImage;
use crate::infermap::ProbMask;
use crate::nn::{Builder, Conv, Graph, Linear, NodeId, ParamCounts, ParamGroup, ParamStore, Tensor};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, TrainingState, SCHEMA_VERSION};
pub use decoder::Decoder;
pub use encoder::{Encoder, Feature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Unet,
    Unetpp,
    Dla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Densenet121,
    Chexnet,
    Inceptionv3,
    Resnet50,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

macro_rules! string_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub const ALL: &'static [$t] = &[$(<$t>::$v),+];

            pub fn as_str(self) -> &'static str {
                match self { $(<$t>::$v => $s),+ }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(<$t>::$v),)+
                    other => Err(Error::invalid(stringify!($t), format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(DecoderKind, Unet => "unet", Unetpp => "unetpp", Dla => "dla");
string_enum!(EncoderKind, Densenet121 => "densenet121", Chexnet => "chexnet", Inceptionv3 => "inceptionv3", Resnet50 => "resnet50");
string_enum!(Scale, Paper => "paper", Desk => "desk");

impl Scale {
    /// Number of 2x downsampling steps in the encoder.
    pub fn depth(self) -> usize {
        match self {
            Scale::Paper => 5,
            Scale::Desk => 3,
        }
    }

    pub fn default_input_size(self) -> usize {
        match self {
            Scale::Paper => 224,
            Scale::Desk => 64,
        }
    }
}

/// Local file holding encoder weights, in checkpoint format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSource {
    pub name: String,
    pub path: PathBuf,
    /// Expected SHA-256 of the file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
    pub encoder_frozen: bool,
    pub input_size: usize,
    pub scale: Scale,
    #[serde(default)]
    pub pretrained: Option<WeightSource>,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(decoder: DecoderKind, encoder: EncoderKind, encoder_frozen: bool, scale: Scale) -> Self {
        Self {
            decoder,
            encoder,
            encoder_frozen,
            input_size: scale.default_input_size(),
            scale,
            pretrained: None,
            seed: 0,
        }
    }

    pub fn desk(decoder: DecoderKind, encoder: EncoderKind) -> Self {
        Self::new(decoder, encoder, false, Scale::Desk)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn downsampling(&self) -> usize {
        1 << self.scale.depth()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsampling();
        if self.input_size == 0 || self.input_size % f != 0 {
            return Err(Error::invalid(
                "input_size",
                format!("{} is not a positive multiple of the encoder downsampling factor {f}", self.input_size),
            ));
        }
        Ok(())
    }

    /// Short name, e.g. `unet-densenet121-frozen`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}",
            self.decoder,
            self.encoder,
            if self.encoder_frozen { "frozen" } else { "unfrozen" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SegmentationSigmoid,
    Classifier2way,
}

/// Where the encoder weights came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub encoder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug)]
enum Network {
    Segmentation { encoder: Encoder, decoder: Decoder, head: Conv },
    Classifier { encoder: Encoder, fc: Linear },
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    config: ModelConfig,
    head: HeadKind,
    store: ParamStore,
    net: Network,
    init: InitRecord,
}

fn build(config: &ModelConfig, head: HeadKind) -> Result<ModelHandle> {
    config.validate()?;
    let depth = config.scale.depth();
    let mut store = ParamStore::new();
    let net = {
        let mut b = Builder::new(&mut store, config.seed);
        b.set_group(ParamGroup::Encoder);
        let encoder = b.scoped("encoder", |b| Encoder::build(b, config.encoder, config.scale, depth));
        let probe = encoder.channels();
        match head {
            HeadKind::SegmentationSigmoid => {
                b.set_group(ParamGroup::Decoder);
                let decoder = b.scoped("decoder", |b| Decoder::build(b, config.decoder, config.scale, &probe));
                b.set_group(ParamGroup::Head);
                let head = b.scoped("head", |b| b.conv(decoder.out_channels, 1, 3, true));
                Network::Segmentation { encoder, decoder, head }
            }
            HeadKind::Classifier2way => {
                b.set_group(ParamGroup::Head);
                let fc = b.scoped("head", |b| b.linear(*probe.last().unwrap(), 2));
                Network::Classifier { encoder, fc }
            }
        }
    };
    let mut handle = ModelHandle {
        config: config.clone(),
        head,
        store,
        net,
        init: InitRecord {
            encoder: "random".into(),
            sha256: None,
            note: None,
        },
    };
    match &config.pretrained {
        Some(src) => handle.load_encoder_weights(src)?,
        None if config.encoder == EncoderKind::Chexnet => {
            handle.init.note = Some("chexnet weights not supplied; densenet121 topology with random init".into());
        }
        None => {}
    }
    handle.store.set_encoder_frozen(config.encoder_frozen);
    Ok(handle)
}

pub fn build_segmentation_model(config: &ModelConfig) -> Result<ModelHandle> {
    build(config, HeadKind::SegmentationSigmoid)
}

/// Encoder, global average pooling and a 2-way dense layer. The decoder
/// field of the returned config is unused.
pub fn build_classifier(
    encoder: EncoderKind,
    scale: Scale,
    pretrained: Option<WeightSource>,
    seed: u64,
) -> Result<ModelHandle> {
    let config = ModelConfig {
        pretrained,
        seed,
        ..ModelConfig::new(DecoderKind::Unet, encoder, false, scale)
    };
    build(&config, HeadKind::Classifier2way)
}

pub fn set_encoder_frozen(handle: &mut ModelHandle, frozen: bool) {
    handle.set_encoder_frozen(frozen);
}

pub fn count_params(handle: &ModelHandle) -> ParamCounts {
    handle.count_params()
}

/// Numerically stable two-way softmax.
pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

impl ModelHandle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn init_record(&self) -> &InitRecord {
        &self.init
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.config.encoder_frozen = frozen;
        self.store.set_encoder_frozen(frozen);
    }

    pub fn count_params(&self) -> ParamCounts {
        self.store.counts()
    }

    /// Records the forward pass on `g`. Segmentation models return the
    /// sigmoid probability map `[n, 1, h, w]`; classifiers return the
    /// pre-softmax scores `[n, 2, 1, 1]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match &self.net {
            Network::Segmentation { encoder, decoder, head } => {
                let feats = encoder.forward(g, x);
                let y = decoder.forward(g, &feats);
                let y = g.tag("decoder.output", y);
                let z = head.apply(g, y);
                g.sigmoid(z)
            }
            Network::Classifier { encoder, fc } => {
                let feats = encoder.forward(g, x);
                let pooled = g.global_avg_pool(feats.last().unwrap().node);
                let z = fc.apply(g, pooled);
                g.tag("head.logits", z)
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if x.c() != 1 || x.h() != s || x.w() != s {
            return Err(Error::ShapeMismatch {
                expected: vec![x.n(), 1, s, s],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass over a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::inference(&self.store);
        let input = g.input(x.clone());
        let out = self.forward(&mut g, input);
        Ok(g.value(out).clone())
    }

    /// Probability map for one image already resized to the input size.
    pub fn predict_mask(&self, image: &CxrImage) -> Result<ProbMask> {
        if self.head != HeadKind::SegmentationSigmoid {
            return Err(Error::invalid("model", "not a segmentation model"));
        }
        let out = self.predict_batch(&image_tensor(&[image])?)?;
        let s = self.config.input_size;
        ProbMask::new(&image.id, Array2::from_shape_vec((s, s), out.into_data()).expect("shape checked"))
    }

    /// Softmax class probabilities `[control, covid]` per image.
    pub fn class_probabilities(&self, x: &Tensor) -> Result<Vec<[f64; 2]>> {
        if self.head != HeadKind::Classifier2way {
            return Err(Error::invalid("model", "not a classifier"));
        }
        let out = self.predict_batch(x)?;
        Ok(out.data().chunks(2).map(|z| softmax2([z[0], z[1]])).collect())
    }

    /// Tagged layers that can be inspected, e.g. for Grad-CAM.
    pub fn layer_names(&self) -> Vec<String> {
        let mut g = Graph::inference(&self.store);
        let s = self.config.downsampling();
        let x = g.input(Tensor::zeros([1, 1, s, s]));
        self.forward(&mut g, x);
        g.tag_names()
    }

    /// Last convolutional feature map of the encoder.
    pub fn default_cam_layer(&self) -> String {
        format!("encoder.stage{}", self.config.scale.depth())
    }

    /// Copies every matching `encoder.*` tensor from a checkpoint file.
    fn load_encoder_weights(&mut self, src: &WeightSource) -> Result<()> {
        if !src.path.is_file() {
            return Err(Error::MissingWeights {
                source_name: src.name.clone(),
                path: src.path.clone(),
            });
        }
        let bytes = std::fs::read(&src.path)?;
        let digest = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes));
        if let Some(want) = &src.sha256 {
            if !want.eq_ignore_ascii_case(&digest) {
                return Err(Error::Checkpoint(format!(
                    "weights `{}` hash {digest} does not match expected {want}",
                    src.name
                )));
            }
        }
        let ck = checkpoint::decode(&bytes)?;
        let mut copied = 0;
        for (name, shape, data) in ck.tensors() {
            if !name.starts_with("encoder.") {
                continue;
            }
            if let Some(id) = self.store.find(name) {
                let p = self.store.get_mut(id);
                if p.shape == shape {
                    p.data.copy_from_slice(data);
                    copied += 1;
                }
            }
        }
        if copied == 0 {
            return Err(Error::Checkpoint(format!(
                "weights `{}` contain no encoder tensors matching {}",
                src.name, self.config.encoder
            )));
        }
        self.init = InitRecord {
            encoder: format!("file:{}", src.name),
            sha256: Some(digest),
            note: None,
        };
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(load_checkpoint(path)?.model)
    }
}

/// Stacks grayscale images into an `[n, 1, h, w]` tensor.
pub fn image_tensor(images: &[&CxrImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("images", "empty batch"))?;
    let (h, w) = first.pixels.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.pixels.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![im.height(), im.width()],
            });
        }
        data.extend(im.pixels.iter());
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests;
