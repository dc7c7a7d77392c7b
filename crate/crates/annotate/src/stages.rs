//! Candidate generation for both stages.

use std::collections::HashMap;

use cxrinf_core::dataset::{make_folds, resize_bilinear, CxrImage, Provenance, Sample};
use cxrinf_core::infermap::DEFAULT_DETECTION_THRESHOLD;
use cxrinf_core::segmodel::{build_segmentation_model, DecoderKind, EncoderKind, ModelConfig, Scale};
use cxrinf_core::trainer::{predict_masks, run_cross_validation, train_segmentation, CvOptions, TrainConfig};
use ndarray::Array2;

use crate::campaign::{Campaign, CandidateInput, Stage};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct StageOptions {
    pub train: TrainConfig,
    pub fold_k: usize,
    pub seed: u64,
    /// Probability at or above which a predicted pixel joins the candidate.
    pub threshold: f64,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::segmentation(),
            fold_k: 5,
            seed: 0,
            threshold: DEFAULT_DETECTION_THRESHOLD,
        }
    }
}

/// U-Net, UNet++ and DLA on a DenseNet-121 encoder.
pub fn default_stage1_configs(scale: Scale) -> Vec<ModelConfig> {
    [DecoderKind::Unet, DecoderKind::Unetpp, DecoderKind::Dla]
        .into_iter()
        .map(|d| ModelConfig::new(d, EncoderKind::Densenet121, false, scale))
        .collect()
}

/// The Stage I trio plus U-Net on the CheXNet and ResNet-50 encoders.
pub fn default_stage2_configs(scale: Scale) -> Vec<ModelConfig> {
    let mut v = default_stage1_configs(scale);
    v.push(ModelConfig::new(DecoderKind::Unet, EncoderKind::Chexnet, false, scale));
    v.push(ModelConfig::new(DecoderKind::Unet, EncoderKind::Resnet50, false, scale));
    v
}

fn binarize(prob: &Array2<f64>, image: &CxrImage, threshold: f64) -> Array2<f64> {
    let field = if prob.dim() == image.pixels.dim() {
        prob.clone()
    } else {
        resize_bilinear(prob, image.height(), image.width())
    };
    field.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

fn seeded(cfg: &ModelConfig, seed: u64, i: usize) -> ModelConfig {
    cfg.clone().with_seed(cfg.seed ^ seed.wrapping_add(i as u64 * 0x9E37_79B9))
}

/// Trains every configuration with k-fold cross-validation over the subset
/// and offers each image its manual mask plus one held-out prediction per
/// configuration. Returns the new task ids.
pub fn create_stage1(campaign: &mut Campaign, subset: &[Sample], configs: &[ModelConfig], opts: &StageOptions) -> Result<Vec<String>> {
    if let Some(s) = subset.iter().find(|s| s.mask.is_none()) {
        return Err(Error::MissingManualMask(s.image.id.clone()));
    }
    if configs.is_empty() {
        return Err(Error::Invalid("no model configurations".into()));
    }
    let labels: Vec<_> = subset.iter().map(|s| (s.image.id.clone(), s.label())).collect();
    let k = opts.fold_k;
    let plan = make_folds(&labels, k, (k as f64 - 1.0) / k as f64, opts.seed)?;
    let train = TrainConfig {
        seed: opts.train.seed ^ opts.seed,
        ..opts.train.clone()
    };
    let mut predictions: Vec<HashMap<String, Array2<f64>>> = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        log::info!("stage1: cross-validating {}", cfg.label());
        let out = run_cross_validation(&plan, subset, &seeded(cfg, opts.seed, i), &train, &CvOptions::default())?;
        predictions.push(out.predictions.into_iter().map(|p| (p.mask.image_id, p.mask.pixels)).collect());
    }
    let mut ids = Vec::with_capacity(subset.len());
    for s in subset {
        let manual = s.mask.as_ref().expect("checked above");
        let mut cands = vec![CandidateInput {
            mask: manual.pixels.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            provenance: Provenance::Manual,
            source: "manual".into(),
        }];
        for (cfg, preds) in configs.iter().zip(&predictions) {
            cands.push(CandidateInput {
                mask: binarize(&preds[&s.image.id], &s.image, opts.threshold),
                provenance: Provenance::Model,
                source: cfg.label(),
            });
        }
        ids.push(campaign.add_task(&s.image, Stage::Stage1, cands)?);
    }
    Ok(ids)
}

/// Trains every configuration on the collaborative masks and offers each
/// unannotated image one prediction per configuration.
pub fn create_stage2(
    campaign: &mut Campaign,
    collaborative: &[Sample],
    unannotated: &[CxrImage],
    configs: &[ModelConfig],
    opts: &StageOptions,
) -> Result<Vec<String>> {
    if let Some(s) = collaborative.iter().find(|s| s.mask.is_none()) {
        return Err(Error::Invalid(format!("`{}` has no collaborative mask", s.image.id)));
    }
    if configs.is_empty() {
        return Err(Error::Invalid("no model configurations".into()));
    }
    let train = TrainConfig {
        seed: opts.train.seed ^ opts.seed,
        ..opts.train.clone()
    };
    let images: Vec<&CxrImage> = unannotated.iter().collect();
    let mut predictions = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        log::info!("stage2: training {}", cfg.label());
        let mut model = build_segmentation_model(&seeded(cfg, opts.seed, i))?;
        train_segmentation(&mut model, collaborative, &train, None)?;
        let (masks, _) = predict_masks(&model, &images, train.batch_size)?;
        predictions.push(masks);
    }
    let mut ids = Vec::with_capacity(unannotated.len());
    for (j, image) in unannotated.iter().enumerate() {
        let cands = configs
            .iter()
            .zip(&predictions)
            .map(|(cfg, preds)| CandidateInput {
                mask: binarize(&preds[j].pixels, image, opts.threshold),
                provenance: Provenance::Model,
                source: cfg.label(),
            })
            .collect();
        ids.push(campaign.add_task(image, Stage::Stage2, cands)?);
    }
    Ok(ids)
}
