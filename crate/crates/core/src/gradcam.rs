//! Grad-CAM maps from a class-score network and their comparison with
//! infection maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_bilinear, CxrImage, SegMask};
use crate::infermap::{render_infection_map, InfectionMap, ProbMask};
use crate::metrics::{map_overlap_stats, OverlapStats};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};
use crate::segmodel::{HeadKind, ModelHandle};
use crate::{Error, Result};

/// A network producing pre-softmax class scores `[n, classes, 1, 1]` with
/// tagged intermediate feature maps.
pub trait ScoreModel {
    fn store(&self) -> &ParamStore;
    fn scores(&self, g: &mut Graph, x: NodeId) -> NodeId;
}

impl ScoreModel for ModelHandle {
    fn store(&self) -> &ParamStore {
        ModelHandle::store(self)
    }

    fn scores(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.forward(g, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub image_id: String,
    pub class_index: usize,
    /// Resized to the input and divided by its maximum (all zero if the
    /// maximum is zero).
    pub values: Array2<f64>,
    /// `ReLU(sum_k alpha_k A^k)` at the layer's own resolution.
    pub raw: Array2<f64>,
    /// Channel weights `alpha_k`.
    pub weights: Vec<f64>,
    pub source_layer: String,
}

/// Grad-CAM for one input `[1, c, h, w]`, resized to `out` (rows, cols).
pub fn grad_cam_tensor<M: ScoreModel + ?Sized>(
    model: &M,
    x: &Tensor,
    image_id: &str,
    class_index: usize,
    layer: &str,
    out: (usize, usize),
) -> Result<ActivationMap> {
    if x.n() != 1 {
        return Err(Error::invalid("x", "Grad-CAM takes one image at a time"));
    }
    let mut g = Graph::explain(model.store());
    let input = g.input(x.clone());
    let scores = model.scores(&mut g, input);
    let a = g.tagged(layer).ok_or_else(|| Error::UnknownLayer {
        name: layer.to_string(),
        available: g.tag_names(),
    })?;
    let classes = g.value(scores).c();
    if class_index >= classes {
        return Err(Error::invalid("class_index", format!("{class_index} >= {classes} classes")));
    }
    let mut seed = Tensor::zeros(g.value(scores).shape());
    seed.data_mut()[class_index] = 1.0;
    let grads = g.backward(vec![(scores, seed)], &[a]);
    let av = g.value(a);
    let [_, k, h, w] = av.shape();
    let zero = Tensor::zeros(av.shape());
    let da = grads.node(a).unwrap_or(&zero);
    let z = (h * w) as f64;
    let weights: Vec<f64> = (0..k).map(|c| da.plane(0, c).iter().sum::<f64>() / z).collect();
    let mut raw = Array2::zeros((h, w));
    for (c, alpha) in weights.iter().enumerate() {
        for (r, v) in raw.iter_mut().zip(av.plane(0, c)) {
            *r += alpha * v;
        }
    }
    raw.mapv_inplace(|v: f64| v.max(0.0));
    let mut values = if (h, w) == out { raw.clone() } else { resize_bilinear(&raw, out.0, out.1) };
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    } else {
        values.fill(0.0);
    }
    Ok(ActivationMap {
        image_id: image_id.to_string(),
        class_index,
        values,
        raw,
        weights,
        source_layer: layer.to_string(),
    })
}

/// Grad-CAM of `class_index` (0 control, 1 COVID) at `layer` for an image
/// at the classifier's input size.
pub fn grad_cam(model: &ModelHandle, image: &CxrImage, class_index: usize, layer: &str) -> Result<ActivationMap> {
    if model.head() != HeadKind::Classifier2way {
        return Err(Error::invalid("model", "Grad-CAM needs a classifier"));
    }
    let x = crate::segmodel::image_tensor(&[image])?;
    grad_cam_tensor(model, &x, &image.id, class_index, layer, image.pixels.dim())
}

/// Activation map rendered through the infection-map compositor.
pub fn render_activation(image: &CxrImage, act: &ActivationMap, tau_vis: f64) -> Result<InfectionMap> {
    render_infection_map(image, &ProbMask::new(&act.image_id, act.values.clone())?, tau_vis)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationComparison {
    pub activation: OverlapStats,
    pub infection: OverlapStats,
    /// Infection minus activation.
    pub mass_inside_gain: Option<f64>,
    pub iou_gain: Option<f64>,
}

pub fn compare_explanations(act: &ActivationMap, prob: &ProbMask, gt: &SegMask) -> Result<ExplanationComparison> {
    let a = map_overlap_stats(act.values.view(), gt)?;
    let p = map_overlap_stats(prob.pixels.view(), gt)?;
    let diff = |x: Option<f64>, y: Option<f64>| Some(x? - y?);
    Ok(ExplanationComparison {
        activation: a,
        infection: p,
        mass_inside_gain: diff(p.mass_inside, a.mass_inside),
        iou_gain: diff(p.iou_at_half, a.iou_at_half),
    })
}
