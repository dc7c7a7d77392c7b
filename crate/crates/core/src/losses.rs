//! Per-pixel segmentation losses and the focal + dice hybrid objective.
//!
//! `p` denotes the ground-truth probability of the positive class and `q`
//! the predicted one. Predicted probabilities are clamped to
//! `[Q_MIN, 1 - Q_MIN]` before any logarithm; the clamp has zero derivative
//! outside that band.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::SegMask;
use crate::{Error, Result};

pub const Q_MIN: f64 = 1e-7;
pub const DICE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Positive-class weight.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Dice smoothing term, added to numerator and denominator.
    pub epsilon: f64,
    /// Weight of the focal term in the hybrid sum.
    pub focal_weight: f64,
    /// Weight of the dice term in the hybrid sum.
    pub dice_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            epsilon: DICE_EPSILON,
            focal_weight: 1.0,
            dice_weight: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", format!("{} not in [0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", format!("{} is negative", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", format!("{} is not positive", self.epsilon)));
        }
        if !(self.focal_weight >= 0.0 && self.dice_weight >= 0.0) {
            return Err(Error::invalid("weights", "term weights must be non-negative"));
        }
        Ok(())
    }
}

#[inline]
fn clamp_q(q: f64) -> f64 {
    q.clamp(Q_MIN, 1.0 - Q_MIN)
}

#[inline]
fn in_band(q: f64) -> bool {
    (Q_MIN..=1.0 - Q_MIN).contains(&q)
}

pub fn cross_entropy(p: f64, q: f64) -> f64 {
    let q = clamp_q(q);
    -p * q.ln() - (1.0 - p) * (1.0 - q).ln()
}

pub fn balanced_cross_entropy(p: f64, q: f64, alpha: f64) -> f64 {
    let q = clamp_q(q);
    -alpha * p * q.ln() - (1.0 - alpha) * (1.0 - p) * (1.0 - q).ln()
}

pub fn focal(p: f64, q: f64, alpha: f64, gamma: f64) -> f64 {
    let q = clamp_q(q);
    -alpha * (1.0 - q).powf(gamma) * p * q.ln()
        - (1.0 - alpha) * q.powf(gamma) * (1.0 - p) * (1.0 - q).ln()
}

/// d focal / d q.
pub fn focal_grad(p: f64, q: f64, alpha: f64, gamma: f64) -> f64 {
    if !in_band(q) {
        return 0.0;
    }
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    // gamma * x^(gamma-1) vanishes at gamma = 0 even where x^(-1) is large.
    let pow_m1 = |x: f64| if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    let pos = -alpha * p * (-pow_m1(1.0 - q) * lq + (1.0 - q).powf(gamma) / q);
    let neg = -(1.0 - alpha) * (1.0 - p) * (pow_m1(q) * l1q - q.powf(gamma) / (1.0 - q));
    pos + neg
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: vec![a.0, a.1],
            got: vec![b.0, b.1],
        });
    }
    Ok(())
}

/// Smoothed overlap `(2|Y ∩ Ŷ| + ε) / (|Y| + |Ŷ| + ε)` of two binary masks.
pub fn dice_coefficient(y: &SegMask, pred: &SegMask) -> Result<f64> {
    dice_coefficient_fields(y.pixels.view(), pred.pixels.view(), DICE_EPSILON)
}

pub fn dice_coefficient_fields(y: ArrayView2<f64>, pred: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    check_shapes(y.dim(), pred.dim())?;
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    Zip::from(&y).and(&pred).for_each(|&a, &b| {
        let (a, b) = ((a >= 0.5) as u8 as f64, (b >= 0.5) as u8 as f64);
        inter += a * b;
        sy += a;
        sp += b;
    });
    Ok((2.0 * inter + epsilon) / (sy + sp + epsilon))
}

pub fn dice_loss(p: ArrayView2<f64>, q: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    check_shapes(p.dim(), q.dim())?;
    let (mut pq, mut sp, mut sq) = (0.0, 0.0, 0.0);
    Zip::from(&p).and(&q).for_each(|&a, &b| {
        pq += a * b;
        sp += a;
        sq += b;
    });
    Ok(1.0 - (2.0 * pq + epsilon) / (sp + sq + epsilon))
}

pub fn dice_loss_grad(p: ArrayView2<f64>, q: ArrayView2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    check_shapes(p.dim(), q.dim())?;
    let (mut pq, mut sp, mut sq) = (0.0, 0.0, 0.0);
    Zip::from(&p).and(&q).for_each(|&a, &b| {
        pq += a * b;
        sp += a;
        sq += b;
    });
    let num = 2.0 * pq + epsilon;
    let den = sp + sq + epsilon;
    Ok(p.mapv(|pi| -(2.0 * pi * den - num) / (den * den)))
}

/// Pixel-mean focal loss.
pub fn focal_mean(p: ArrayView2<f64>, q: ArrayView2<f64>, params: &LossParams) -> Result<f64> {
    check_shapes(p.dim(), q.dim())?;
    let mut acc = 0.0;
    Zip::from(&p)
        .and(&q)
        .for_each(|&a, &b| acc += focal(a, b, params.alpha, params.gamma));
    Ok(acc / p.len() as f64)
}

/// Focal (pixel mean) plus dice loss for one image.
pub fn hybrid_loss(p: ArrayView2<f64>, q: ArrayView2<f64>, params: &LossParams) -> Result<f64> {
    Ok(params.focal_weight * focal_mean(p, q, params)?
        + params.dice_weight * dice_loss(p, q, params.epsilon)?)
}

/// Gradient of [`hybrid_loss`] with respect to `q`.
pub fn hybrid_loss_grad(p: ArrayView2<f64>, q: ArrayView2<f64>, params: &LossParams) -> Result<Array2<f64>> {
    let mut g = dice_loss_grad(p, q, params.epsilon)?;
    g.mapv_inplace(|v| v * params.dice_weight);
    let n = p.len() as f64;
    Zip::from(&mut g).and(&p).and(&q).for_each(|g, &a, &b| {
        *g += params.focal_weight * focal_grad(a, b, params.alpha, params.gamma) / n;
    });
    Ok(g)
}

/// Batch objective: per-image hybrid loss averaged over the batch.
pub fn hybrid_loss_batch(pairs: &[(ArrayView2<f64>, ArrayView2<f64>)], params: &LossParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "empty batch"));
    }
    let mut acc = 0.0;
    for (p, q) in pairs {
        acc += hybrid_loss(*p, *q, params)?;
    }
    Ok(acc / pairs.len() as f64)
}
