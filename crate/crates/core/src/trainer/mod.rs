//! Training loops for the segmentation and classification heads, the
//! cross-validation driver and timed inference.

mod cv;
mod dump;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, CxrImage, Label, Sample};
use crate::infermap::ProbMask;
use crate::losses::{hybrid_loss, hybrid_loss_grad, LossParams};
use crate::nn::{apply_bn_updates, AdamConfig, AdamState, Graph, Tensor};
use crate::segmodel::{load_checkpoint, save_checkpoint, softmax2, HeadKind, InitRecord, ModelConfig, ModelHandle, TrainingState};
use crate::{exec, Error, Result};

pub use cv::{run_cross_validation, CvOptions, CvOutcome, FoldPrediction};
pub use dump::{read_prediction_dump, write_prediction_dump, DumpEntry};

/// Keras default batch-norm momentum.
pub const BN_MOMENTUM: f64 = 0.99;

/// Activation memory allowed for one training batch.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Hybrid(LossParams),
    CategoricalCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    /// Upper bound on activation memory per batch, in bytes.
    #[serde(default = "default_budget")]
    pub memory_budget: usize,
    /// After the last epoch, replace batch-norm running statistics with
    /// population statistics of the training set.
    #[serde(default = "default_true")]
    pub recalibrate_bn: bool,
}

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    BN_MOMENTUM
}

fn default_budget() -> usize {
    DEFAULT_MEMORY_BUDGET
}

impl TrainConfig {
    /// 50 epochs, lr 1e-4, batch 32, focal + dice.
    pub fn segmentation() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 32,
            loss: LossKind::Hybrid(LossParams::default()),
            seed: 0,
            bn_momentum: BN_MOMENTUM,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            recalibrate_bn: true,
        }
    }

    /// 10 epochs, lr 1e-5, batch 32, categorical cross-entropy.
    pub fn classifier() -> Self {
        Self {
            optimizer: AdamConfig {
                learning_rate: 1e-5,
                ..AdamConfig::default()
            },
            epochs: 10,
            loss: LossKind::CategoricalCrossEntropy,
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("{} must be positive", o.learning_rate)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::invalid("beta", "beta1 and beta2 must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum", "must lie in [0, 1)"));
        }
        if let LossKind::Hybrid(p) = &self.loss {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub head: HeadKind,
    pub init: InitRecord,
    /// Mean training loss of each epoch, across every run of this model.
    pub history: Vec<f64>,
    pub epochs_done: usize,
    pub batch_size_used: usize,
    pub train_samples: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub inference_ms_per_sample: Option<f64>,
    #[serde(default)]
    pub fold: Option<usize>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Inputs and targets flattened per sample, at the model's input size.
struct Prepared {
    size: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Target>,
}

enum Target {
    Mask(Array2<f64>),
    Class(usize),
}

fn resized(image: &CxrImage, size: usize) -> Result<CxrImage> {
    if image.height() == size && image.width() == size {
        Ok(image.clone())
    } else {
        normalize(image, size)
    }
}

fn prepare(model: &ModelHandle, samples: &[Sample]) -> Result<Prepared> {
    if samples.is_empty() {
        return Err(Error::invalid("train_set", "training set is empty"));
    }
    let size = model.input_size();
    let head = model.head();
    let items = exec::map(samples, |s| -> Result<(Vec<f64>, Target)> {
        let img = resized(&s.image, size)?;
        let target = match head {
            HeadKind::Classifier2way => Target::Class(s.label().index()),
            HeadKind::SegmentationSigmoid => match &s.mask {
                Some(m) if m.pixels.dim() == (size, size) => Target::Mask(m.pixels.clone()),
                Some(m) => Target::Mask(crate::dataset::resize_bilinear(&m.pixels, size, size).mapv(|v| (v >= 0.5) as u8 as f64)),
                None if s.label() == Label::Control => Target::Mask(Array2::zeros((size, size))),
                None => return Err(Error::invalid("train_set", format!("`{}` has no segmentation mask", s.image.id))),
            },
        };
        Ok((img.pixels.iter().copied().collect(), target))
    });
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for it in items {
        let (x, t) = it?;
        inputs.push(x);
        targets.push(t);
    }
    Ok(Prepared { size, inputs, targets })
}

/// Per-epoch shuffle seed; depends only on the run seed and epoch index so a
/// resumed run sees the same orderings as an uninterrupted one.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Largest batch whose recorded activations fit in the budget.
fn capped_batch(model: &ModelHandle, requested: usize, budget: usize) -> usize {
    let s = model.input_size();
    let mut g = Graph::training(model.store());
    let x = g.input(Tensor::zeros([1, 1, s, s]));
    model.forward(&mut g, x);
    // values, gradients and batch-norm caches
    let per_sample = 3 * 8 * g.activation_len();
    requested.min((budget / per_sample.max(1)).max(1))
}

struct Progress {
    adam: AdamState,
    epochs_done: usize,
    history: Vec<f64>,
}

fn batch_loss<'m>(model: &'m ModelHandle, data: &Prepared, idx: &[usize], cfg: &TrainConfig) -> Result<(f64, Graph<'m>, crate::nn::NodeId, Tensor)> {
    let s = data.size;
    let n = idx.len();
    let mut xs = Vec::with_capacity(n * s * s);
    for &i in idx {
        xs.extend_from_slice(&data.inputs[i]);
    }
    let mut g = Graph::training(model.store());
    let x = g.input(Tensor::from_vec([n, 1, s, s], xs)?);
    let out = model.forward(&mut g, x);
    let y = g.value(out);
    let (loss, grad) = match cfg.loss {
        LossKind::Hybrid(params) => {
            let parts = exec::map_range(n, |b| -> Result<(f64, Vec<f64>)> {
                let Target::Mask(p) = &data.targets[idx[b]] else {
                    return Err(Error::invalid("loss", "hybrid loss needs mask targets"));
                };
                let q = ArrayView2::from_shape((s, s), y.sample(b)).expect("output is s x s");
                let l = hybrid_loss(p.view(), q, &params)?;
                let gq = hybrid_loss_grad(p.view(), q, &params)?;
                Ok((l, gq.iter().map(|v| v / n as f64).collect()))
            });
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(n * s * s);
            for p in parts {
                let (l, g) = p?;
                loss += l;
                grad.extend(g);
            }
            (loss / n as f64, Tensor::from_vec(y.shape(), grad)?)
        }
        LossKind::CategoricalCrossEntropy => {
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(2 * n);
            for (b, z) in y.data().chunks(2).enumerate() {
                let Target::Class(c) = data.targets[idx[b]] else {
                    return Err(Error::invalid("loss", "cross-entropy needs class targets"));
                };
                let p = softmax2([z[0], z[1]]);
                loss -= p[c].max(f64::MIN_POSITIVE).ln();
                for (k, pk) in p.iter().enumerate() {
                    grad.push((pk - (k == c) as u8 as f64) / n as f64);
                }
            }
            (loss / n as f64, Tensor::from_vec(y.shape(), grad)?)
        }
    };
    Ok((loss, g, out, grad))
}

fn run_epochs(model: &mut ModelHandle, data: &Prepared, cfg: &TrainConfig, batch: usize, progress: &mut Progress, epochs: usize) -> Result<()> {
    let n = data.inputs.len();
    for _ in 0..epochs {
        let epoch = progress.epochs_done;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        for (bi, idx) in order.chunks(batch).enumerate() {
            let (loss, g, out, seed) = batch_loss(model, data, idx, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    value: loss,
                });
            }
            let grads = g.backward(vec![(out, seed)], &[]);
            let updates = g.into_bn_updates();
            let pg = grads.params();
            progress.adam.update(&cfg.optimizer, model.store_mut(), pg);
            apply_bn_updates(model.store_mut(), &updates, cfg.bn_momentum);
            total += loss * idx.len() as f64;
        }
        let mean = total / n as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        progress.history.push(mean);
        progress.epochs_done += 1;
    }
    Ok(())
}

/// Population mean and variance of every trainable batch-norm layer's
/// input, accumulated over the training set in batches.
fn recalibrate_bn(model: &mut ModelHandle, data: &Prepared, batch: usize) -> Result<()> {
    let s = data.size;
    let order: Vec<usize> = (0..data.inputs.len()).collect();
    let mut acc: Vec<(crate::nn::BnUpdate, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for idx in order.chunks(batch) {
        let mut xs = Vec::with_capacity(idx.len() * s * s);
        for &i in idx {
            xs.extend_from_slice(&data.inputs[i]);
        }
        let mut g = Graph::statistics(model.store());
        let x = g.input(Tensor::from_vec([idx.len(), 1, s, s], xs)?);
        model.forward(&mut g, x);
        for (k, u) in g.into_bn_updates().into_iter().enumerate() {
            let m = u.count as f64;
            let biased = if u.count > 1 { (m - 1.0) / m } else { 1.0 };
            if acc.len() <= k {
                let c = u.batch_mean.len();
                acc.push((u.clone(), vec![0.0; c], vec![0.0; c], 0));
            }
            let slot = &mut acc[k];
            for ch in 0..u.batch_mean.len() {
                let mu = u.batch_mean[ch];
                slot.1[ch] += m * mu;
                slot.2[ch] += m * (u.batch_var[ch] * biased + mu * mu);
            }
            slot.3 += u.count;
        }
    }
    let updates: Vec<crate::nn::BnUpdate> = acc
        .into_iter()
        .map(|(mut u, sum, sq, count)| {
            let m = count as f64;
            let unbias = if count > 1 { m / (m - 1.0) } else { 1.0 };
            u.batch_mean = sum.iter().map(|v| v / m).collect();
            u.batch_var = sq.iter().zip(&u.batch_mean).map(|(q, mu)| ((q / m) - mu * mu).max(0.0) * unbias).collect();
            u.count = count;
            u
        })
        .collect();
    apply_bn_updates(model.store_mut(), &updates, 0.0);
    Ok(())
}

fn check_head(model: &ModelHandle, cfg: &TrainConfig) -> Result<()> {
    match (model.head(), cfg.loss) {
        (HeadKind::SegmentationSigmoid, LossKind::Hybrid(_)) | (HeadKind::Classifier2way, LossKind::CategoricalCrossEntropy) => Ok(()),
        (head, _) => Err(Error::invalid("loss", format!("loss does not fit a {head:?} head"))),
    }
}

fn finish(model: &ModelHandle, data: &Prepared, cfg: &TrainConfig, batch: usize, progress: Progress, checkpoint: Option<&Path>) -> Result<RunRecord> {
    let mut record = RunRecord {
        config: cfg.clone(),
        model: model.config().clone(),
        head: model.head(),
        init: model.init_record().clone(),
        history: progress.history,
        epochs_done: progress.epochs_done,
        batch_size_used: batch,
        train_samples: data.inputs.len(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        inference_ms_per_sample: None,
        fold: None,
    };
    let probe = data.inputs.len().min(4);
    let started = Instant::now();
    for x in &data.inputs[..probe] {
        model.predict_batch(&Tensor::from_vec([1, 1, data.size, data.size], x.clone())?)?;
    }
    record.inference_ms_per_sample = Some(started.elapsed().as_secs_f64() * 1e3 / probe as f64);
    if let Some(path) = checkpoint {
        let state = TrainingState {
            adam: progress.adam,
            meta: serde_json::json!({
                "epochs_done": record.epochs_done,
                "history": record.history,
                "train_config": cfg,
            }),
        };
        save_checkpoint(path, model, Some(&state))?;
        record.save_json(&path.with_extension("run.json"))?;
    }
    Ok(record)
}

fn train(model: &mut ModelHandle, samples: &[Sample], cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    check_head(model, cfg)?;
    let data = prepare(model, samples)?;
    let batch = capped_batch(model, cfg.batch_size, cfg.memory_budget);
    let mut progress = Progress {
        adam: AdamState::new(model.store()),
        epochs_done: 0,
        history: Vec::new(),
    };
    run_epochs(model, &data, cfg, batch, &mut progress, cfg.epochs)?;
    if cfg.recalibrate_bn {
        recalibrate_bn(model, &data, batch)?;
    }
    finish(model, &data, cfg, batch, progress, checkpoint)
}

/// Trains with the hybrid loss; samples need masks (controls without one
/// train against an empty mask).
pub fn train_segmentation(model: &mut ModelHandle, samples: &[Sample], cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<RunRecord> {
    if model.head() != HeadKind::SegmentationSigmoid {
        return Err(Error::invalid("model", "train_segmentation needs a segmentation model"));
    }
    train(model, samples, cfg, checkpoint)
}

pub fn train_classifier(model: &mut ModelHandle, samples: &[Sample], cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<RunRecord> {
    if model.head() != HeadKind::Classifier2way {
        return Err(Error::invalid("model", "train_classifier needs a classifier"));
    }
    train(model, samples, cfg, checkpoint)
}

/// Continues a checkpointed run for `cfg.epochs` more epochs, with the
/// optimizer state and epoch counter restored.
pub fn resume_training(checkpoint: &Path, samples: &[Sample], cfg: &TrainConfig, out: Option<&Path>) -> Result<(ModelHandle, RunRecord)> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let mut model = ck.model;
    check_head(&model, cfg)?;
    let state = ck
        .training
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
    let epochs_done = state.meta["epochs_done"].as_u64().unwrap_or(0) as usize;
    let history: Vec<f64> = serde_json::from_value(state.meta["history"].clone()).unwrap_or_default();
    let data = prepare(&model, samples)?;
    let batch = capped_batch(&model, cfg.batch_size, cfg.memory_budget);
    let mut progress = Progress {
        adam: state.adam,
        epochs_done,
        history,
    };
    run_epochs(&mut model, &data, cfg, batch, &mut progress, cfg.epochs)?;
    if cfg.recalibrate_bn {
        recalibrate_bn(&mut model, &data, batch)?;
    }
    let record = finish(&model, &data, cfg, batch, progress, out)?;
    Ok((model, record))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Mask(ProbMask),
    /// Softmax probabilities `[control, covid]`.
    Scores { image_id: String, probabilities: [f64; 2] },
}

/// Runs one image (already at the model's input size) and reports the
/// wall-clock time in milliseconds.
pub fn predict(model: &ModelHandle, image: &CxrImage) -> Result<(Prediction, f64)> {
    let started = Instant::now();
    let p = match model.head() {
        HeadKind::SegmentationSigmoid => Prediction::Mask(model.predict_mask(image)?),
        HeadKind::Classifier2way => {
            let x = crate::segmodel::image_tensor(&[image])?;
            Prediction::Scores {
                image_id: image.id.clone(),
                probabilities: model.class_probabilities(&x)?[0],
            }
        }
    };
    Ok((p, started.elapsed().as_secs_f64() * 1e3))
}

/// Probability maps for many images, resized to the model input first.
/// Returns the masks and the mean milliseconds per sample.
pub fn predict_masks(model: &ModelHandle, images: &[&CxrImage], batch: usize) -> Result<(Vec<ProbMask>, f64)> {
    let size = model.input_size();
    let started = Instant::now();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let resized = chunk.iter().map(|im| resized(im, size)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&CxrImage> = resized.iter().collect();
        let y = model.predict_batch(&crate::segmodel::image_tensor(&refs)?)?;
        for (i, im) in chunk.iter().enumerate() {
            let field = Array2::from_shape_vec((size, size), y.sample(i).to_vec()).expect("output is s x s");
            out.push(ProbMask::new(&im.id, field)?);
        }
    }
    let ms = started.elapsed().as_secs_f64() * 1e3 / images.len().max(1) as f64;
    Ok((out, ms))
}
