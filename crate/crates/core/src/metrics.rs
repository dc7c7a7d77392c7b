//! Confusion matrices, the sensitivity/specificity/precision/accuracy/F-beta
//! suite, normal-approximation confidence intervals and fold aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, SegMask};
use crate::infermap::ProbMask;
use crate::{exec, Error, Result};

/// z for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// Records one prediction.
    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

impl std::str::FromStr for ConfusionMatrix {
    type Err = Error;

    /// Parses `tn=..,fp=..,fn=..,tp=..` in any order.
    fn from_str(s: &str) -> Result<Self> {
        let mut cm = ConfusionMatrix::default();
        let mut seen = [false; 4];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid("confusion", format!("expected key=value, got `{part}`")))?;
            let v: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid("confusion", format!("`{v}` is not a count")))?;
            let slot = match k.trim() {
                "tn" => (0, &mut cm.tn),
                "fp" => (1, &mut cm.fp),
                "fn" => (2, &mut cm.fn_),
                "tp" => (3, &mut cm.tp),
                other => return Err(Error::invalid("confusion", format!("unknown key `{other}`"))),
            };
            seen[slot.0] = true;
            *slot.1 = v;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("confusion", "all of tn, fp, fn, tp are required"));
        }
        Ok(cm)
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: vec![a.0, a.1],
            got: vec![b.0, b.1],
        });
    }
    Ok(())
}

/// Pixel-level confusion: foreground is the positive class, predictions are
/// `prob >= threshold`.
pub fn confusion_pixel(gt: &SegMask, prob: &ProbMask, threshold: f64) -> Result<ConfusionMatrix> {
    confusion_fields(gt.pixels.view(), prob.pixels.view(), threshold)
}

pub fn confusion_fields(gt: ArrayView2<f64>, prob: ArrayView2<f64>, threshold: f64) -> Result<ConfusionMatrix> {
    check_dims(gt.dim(), prob.dim())?;
    let mut cm = ConfusionMatrix::default();
    Zip::from(&gt)
        .and(&prob)
        .for_each(|&g, &p| cm.record(g >= 0.5, p >= threshold));
    Ok(cm)
}

/// Element-wise sum of per-image pixel confusions.
pub fn confusion_pixel_batch(pairs: &[(&SegMask, &ProbMask)], threshold: f64) -> Result<ConfusionMatrix> {
    let parts = exec::map(pairs, |(g, p)| confusion_pixel(g, p, threshold));
    parts.into_iter().sum::<Result<ConfusionMatrix>>()
}

/// Sample-level confusion with COVID as the positive class.
pub fn confusion_sample(labels: &[Label], detections: &[bool]) -> Result<ConfusionMatrix> {
    if labels.len() != detections.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            got: vec![detections.len()],
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (l, &d) in labels.iter().zip(detections) {
        cm.record(*l == Label::Covid, d);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pixel,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Sensitivity,
    Specificity,
    Precision,
    F1,
    F2,
    Accuracy,
}

impl Metric {
    /// Reporting order.
    pub const ALL: [Metric; 6] = [
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
        Metric::F1,
        Metric::F2,
        Metric::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
            Metric::F2 => "f2",
            Metric::Accuracy => "accuracy",
        }
    }

    /// Sample count behind the metric's interval: actual positives for
    /// sensitivity, actual negatives for specificity, everything otherwise.
    pub fn ci_population(self, cm: &ConfusionMatrix) -> u64 {
        match self {
            Metric::Sensitivity => cm.positives(),
            Metric::Specificity => cm.negatives(),
            _ => cm.total(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub beta: f64,
    pub value: Option<f64>,
}

/// Metric vector derived from one confusion matrix. `None` marks a metric
/// whose denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub level: Level,
    pub counts: ConfusionMatrix,
    pub n: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    /// F-scores for every requested beta.
    pub f_scores: Vec<FScore>,
    /// Half-width of the 95% interval per metric.
    pub ci: BTreeMap<Metric, Option<f64>>,
    /// Percent strings, two decimals, ties to even.
    pub percent: BTreeMap<Metric, String>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::Accuracy => self.accuracy,
            Metric::F1 => self.f1,
            Metric::F2 => self.f2,
        }
    }

    /// Values rounded to two-decimal percent, in table order.
    pub fn percent_row(&self) -> Vec<Option<f64>> {
        Metric::ALL.iter().map(|&m| self.get(m).map(percent_2dp)).collect()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(1 + b^2) P S / (b^2 P + S)`.
pub fn f_beta(precision: Option<f64>, sensitivity: Option<f64>, beta: f64) -> Option<f64> {
    let (p, s) = (precision?, sensitivity?);
    let b2 = beta * beta;
    let den = b2 * p + s;
    (den > 0.0).then(|| (1.0 + b2) * p * s / den)
}

/// Half-width `z * sqrt(m (1 - m) / n)`.
pub fn confidence_interval(metric: f64, n: u64, z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&metric) {
        return Err(Error::invalid("metric", format!("{metric} not in [0, 1]")));
    }
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be positive"));
    }
    Ok(z * (metric * (1.0 - metric) / n as f64).sqrt())
}

/// Fraction to percent, rounded to two decimals with ties to even.
pub fn percent_2dp(v: f64) -> f64 {
    (v * 10_000.0).round_ties_even() / 100.0
}

fn format_percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{:.2}", percent_2dp(v)))
}

fn finish(level: Level, counts: ConfusionMatrix, values: [Option<f64>; 6], betas: &[f64]) -> MetricReport {
    let [sensitivity, specificity, precision, f1, f2, accuracy] = values;
    let mut ci = BTreeMap::new();
    let mut percent = BTreeMap::new();
    for (m, v) in Metric::ALL.iter().zip(values) {
        let n = m.ci_population(&counts);
        ci.insert(*m, v.and_then(|v| confidence_interval(v.clamp(0.0, 1.0), n, Z_95).ok()));
        percent.insert(*m, format_percent(v));
    }
    MetricReport {
        level,
        counts,
        n: counts.total(),
        sensitivity,
        specificity,
        precision,
        accuracy,
        f1,
        f2,
        f_scores: betas
            .iter()
            .map(|&beta| FScore {
                beta,
                value: f_beta(precision, sensitivity, beta),
            })
            .collect(),
        ci,
        percent,
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix, betas: &[f64], level: Level) -> MetricReport {
    let sensitivity = ratio(cm.tp, cm.positives());
    let specificity = ratio(cm.tn, cm.negatives());
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let f1 = f_beta(precision, sensitivity, 1.0);
    let f2 = f_beta(precision, sensitivity, 2.0);
    finish(level, *cm, [sensitivity, specificity, precision, f1, f2, accuracy], betas)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Average each metric over the folds where it is defined.
    MacroMean,
    /// Sum the confusion matrices, then recompute.
    Cumulative,
}

pub fn aggregate_folds(reports: &[MetricReport], mode: AggregateMode) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("reports", "nothing to aggregate"))?;
    let counts: ConfusionMatrix = reports.iter().map(|r| r.counts).sum();
    let betas: Vec<f64> = first.f_scores.iter().map(|f| f.beta).collect();
    match mode {
        AggregateMode::Cumulative => Ok(compute_metrics(&counts, &betas, first.level)),
        AggregateMode::MacroMean => {
            let mean = |m: Metric| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(m)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let values = Metric::ALL.map(mean);
            let mut report = finish(first.level, counts, values, &betas);
            for (i, f) in report.f_scores.iter_mut().enumerate() {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.f_scores.get(i)?.value).collect();
                f.value = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            }
            Ok(report)
        }
    }
}

/// How much of a saliency field falls on the annotated region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// `sum(map over gt) / sum(map)`; undefined for an all-zero map.
    pub mass_inside: Option<f64>,
    /// IoU of `{map >= 0.5}` with the mask; undefined when both are empty.
    pub iou_at_half: Option<f64>,
}

pub fn map_overlap_stats(map: ArrayView2<f64>, gt: &SegMask) -> Result<OverlapStats> {
    check_dims(map.dim(), gt.pixels.dim())?;
    let (mut inside, mut total, mut inter, mut union) = (0.0, 0.0, 0u64, 0u64);
    Zip::from(&map).and(&gt.pixels).for_each(|&m, &g| {
        let g = g >= 0.5;
        total += m;
        if g {
            inside += m;
        }
        let p = m >= 0.5;
        inter += (p && g) as u64;
        union += (p || g) as u64;
    });
    Ok(OverlapStats {
        mass_inside: (total > 0.0).then(|| inside / total),
        iou_at_half: (union > 0).then(|| inter as f64 / union as f64),
    })
}

/// IoU of two binary masks; both empty counts as perfect agreement.
pub fn mask_iou(a: &SegMask, b: &SegMask) -> Result<f64> {
    check_dims(a.pixels.dim(), b.pixels.dim())?;
    let (mut inter, mut union) = (0u64, 0u64);
    Zip::from(&a.pixels).and(&b.pixels).for_each(|&x, &y| {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
