use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use crate::dataset::{FoldPlan, Label, Sample};
use crate::infermap::ProbMask;
use crate::segmodel::{build_segmentation_model, ModelConfig};
use crate::{Error, Result};

use super::{predict_masks, train_segmentation, write_prediction_dump, RunRecord, TrainConfig};

#[derive(Clone, Debug, Default)]
pub struct CvOptions {
    /// Receives `fold<k>/model.ckpt`, run records and `predictions/`.
    pub out_dir: Option<PathBuf>,
    /// Restrict to these folds; all folds when `None`.
    pub folds: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPrediction {
    pub fold: usize,
    pub label: Label,
    pub mask: ProbMask,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub records: Vec<RunRecord>,
    pub predictions: Vec<FoldPrediction>,
}

/// Trains one segmentation model per fold on the other folds and predicts
/// the held-out fold, so every sample is predicted exactly once.
pub fn run_cross_validation(
    plan: &FoldPlan,
    samples: &[Sample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvOutcome> {
    plan.validate()?;
    train_config.validate()?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.image.id.as_str(), s)).collect();
    if by_id.len() != samples.len() {
        return Err(Error::invalid("samples", "duplicate image ids"));
    }
    if let Some(id) = plan.assignments.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(Error::invalid("plan", format!("`{id}` is planned but not supplied")));
    }
    if let Some(s) = samples.iter().find(|s| !plan.assignments.contains_key(&s.image.id)) {
        return Err(Error::invalid("samples", format!("`{}` is missing from the fold plan", s.image.id)));
    }
    let folds = opts.folds.clone().unwrap_or_else(|| (0..plan.k).collect());
    if let Some(f) = folds.iter().find(|&&f| f >= plan.k) {
        return Err(Error::invalid("folds", format!("fold {f} >= k = {}", plan.k)));
    }
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for &fold in &folds {
        let pick = |ids: Vec<&str>| ids.into_iter().map(|id| by_id[id].clone()).collect::<Vec<Sample>>();
        let train = pick(plan.train_ids(fold));
        let test = pick(plan.test_ids(fold));
        let cfg = ModelConfig {
            seed: model_config.seed.wrapping_add(fold as u64),
            ..model_config.clone()
        };
        let tc = TrainConfig {
            seed: train_config.seed.wrapping_add(fold as u64),
            ..train_config.clone()
        };
        log::info!("fold {fold}: {} train / {} test", train.len(), test.len());
        let mut model = build_segmentation_model(&cfg)?;
        let ckpt = opts.out_dir.as_ref().map(|d| d.join(format!("fold{fold}")).join("model.ckpt"));
        let mut record = train_segmentation(&mut model, &train, &tc, ckpt.as_deref())?;
        record.fold = Some(fold);
        if let Some(path) = &ckpt {
            record.save_json(&path.with_extension("run.json"))?;
        }
        let images: Vec<_> = test.iter().map(|s| &s.image).collect();
        let (masks, ms) = predict_masks(&model, &images, tc.batch_size)?;
        record.inference_ms_per_sample = Some(ms);
        for (s, mask) in test.iter().zip(masks) {
            predictions.push(FoldPrediction {
                fold,
                label: s.label(),
                mask,
            });
        }
        records.push(record);
    }
    let mut seen = BTreeSet::new();
    if let Some(p) = predictions.iter().find(|p| !seen.insert(p.mask.image_id.clone())) {
        return Err(Error::DuplicateId(p.mask.image_id.clone()));
    }
    if let Some(dir) = &opts.out_dir {
        let items: Vec<_> = predictions
            .iter()
            .map(|p| (p.mask.clone(), Some(p.fold), Some(p.label)))
            .collect();
        write_prediction_dump(&dir.join("predictions"), &items)?;
    }
    Ok(CvOutcome { records, predictions })
}
