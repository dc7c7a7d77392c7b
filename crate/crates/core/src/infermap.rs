//! Infection maps: jet-coloured probability hue and saturation composited
//! over the radiograph's own brightness, plus the any-pixel detection rule.

use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{CxrImage, SegMask};
use crate::{pngio, Error, Result};

pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.01;
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.5;

/// Per-pixel infection probability from the segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMask {
    pub image_id: String,
    pub pixels: Array2<f64>,
}

impl ProbMask {
    pub fn new(image_id: impl Into<String>, pixels: Array2<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("prob", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            image_id: image_id.into(),
            pixels,
        })
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.pixels.iter().filter(|&&p| p >= threshold).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfectionMap {
    pub image_id: String,
    /// `[h, w, 3]`, channels in [0, 1].
    pub rgb: Array3<f64>,
    pub visibility_threshold: f64,
}

/// Piecewise-linear jet.
pub fn jet_colormap(v: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid("v", format!("{v} outside [0, 1]")));
    }
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    Ok([ch(3.0), ch(2.0), ch(1.0)])
}

/// Hexcone RGB to HSV, hue as a fraction of a turn in [0, 1).
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d <= 0.0 {
        return [0.0, s, max];
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    [(h / 6.0).rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s <= 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn check_shape(image: &Array2<f64>, prob: &Array2<f64>) -> Result<()> {
    if image.dim() != prob.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![image.nrows(), image.ncols()],
            got: vec![prob.nrows(), prob.ncols()],
        });
    }
    Ok(())
}

pub fn render_infection_map(image: &CxrImage, prob: &ProbMask, tau_vis: f64) -> Result<InfectionMap> {
    if !(0.0..1.0).contains(&tau_vis) {
        return Err(Error::invalid("tau_vis", format!("{tau_vis} outside [0, 1)")));
    }
    check_shape(&image.pixels, &prob.pixels)?;
    let (h, w) = image.pixels.dim();
    let mut rgb = Array3::zeros((h, w, 3));
    for ((y, x), &gray) in image.pixels.indexed_iter() {
        let p = prob.pixels[(y, x)];
        let px = if p > tau_vis {
            let [ph, ps, _] = rgb_to_hsv(jet_colormap(p.clamp(0.0, 1.0))?);
            hsv_to_rgb([ph, ps, gray.clamp(0.0, 1.0)])
        } else {
            [gray; 3]
        };
        for (c, v) in px.into_iter().enumerate() {
            rgb[(y, x, c)] = v;
        }
    }
    Ok(InfectionMap {
        image_id: image.id.clone(),
        rgb,
        visibility_threshold: tau_vis,
    })
}

/// True when at least `min_area_px` pixels reach `threshold`.
pub fn detect(prob: &ProbMask, threshold: f64, min_area_px: usize) -> bool {
    prob.count_at_least(threshold) >= min_area_px.max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    /// Undefined when nothing is predicted positive.
    pub precision: Option<f64>,
    /// Undefined when the ground truth has no positives.
    pub recall: Option<f64>,
}

/// Pixel-level precision and recall over `thresholds`, from one sort of all
/// pixels by probability.
pub fn pr_curve(probs: &[ProbMask], gts: &[SegMask], thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    if probs.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gts.len()],
            got: vec![probs.len()],
        });
    }
    let mut px: Vec<(f64, bool)> = Vec::new();
    for (p, g) in probs.iter().zip(gts) {
        check_shape(&g.pixels, &p.pixels)?;
        Zip::from(&p.pixels)
            .and(&g.pixels)
            .for_each(|&p, &g| px.push((p, g >= 0.5)));
    }
    px.sort_by(|a, b| b.0.total_cmp(&a.0));
    // positives among the first i pixels
    let mut prefix = Vec::with_capacity(px.len() + 1);
    prefix.push(0u64);
    for &(_, g) in &px {
        prefix.push(prefix.last().unwrap() + g as u64);
    }
    let positives = *prefix.last().unwrap();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let predicted = px.partition_point(|&(p, _)| p >= t);
            let tp = prefix[predicted];
            PrPoint {
                threshold: t,
                precision: (predicted > 0).then(|| tp as f64 / predicted as f64),
                recall: (positives > 0).then(|| tp as f64 / positives as f64),
            }
        })
        .collect())
}

/// Sidecar written next to the rendered map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub detected: bool,
    pub max_prob: f64,
    pub positive_px: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub tau_vis: f64,
    pub threshold: f64,
    pub min_area_px: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tau_vis: DEFAULT_VISIBILITY_THRESHOLD,
            threshold: DEFAULT_DETECTION_THRESHOLD,
            min_area_px: 1,
        }
    }
}

pub use crate::dataset::synth::file_stem;

/// Writes `<id>_infmap.png`, `<id>_prob.png` and `<id>.json` into `dir`.
pub fn write_outputs(dir: &Path, image: &CxrImage, prob: &ProbMask, opts: RenderOptions) -> Result<DetectionRecord> {
    std::fs::create_dir_all(dir)?;
    let map = render_infection_map(image, prob, opts.tau_vis)?;
    let stem = file_stem(&image.id);
    pngio::write_rgb8(&dir.join(format!("{stem}_infmap.png")), &map.rgb)?;
    pngio::write_gray16(&dir.join(format!("{stem}_prob.png")), &prob.pixels)?;
    let record = DetectionRecord {
        id: image.id.clone(),
        detected: detect(prob, opts.threshold, opts.min_area_px),
        max_prob: prob.max(),
        positive_px: prob.count_at_least(opts.threshold),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, Provenance, SourceFormat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(pixels: Array2<f64>) -> CxrImage {
        CxrImage {
            id: "t/1".into(),
            pixels,
            source: "t".into(),
            label: Label::Covid,
            original_format: SourceFormat::Png,
        }
    }

    fn prob(pixels: Array2<f64>) -> ProbMask {
        ProbMask::new("t/1", pixels).unwrap()
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet_colormap(0.0).unwrap(), [0.0, 0.0, 0.5]);
        assert_eq!(jet_colormap(0.5).unwrap(), [0.5, 1.0, 0.5]);
        assert_eq!(jet_colormap(1.0).unwrap(), [0.5, 0.0, 0.0]);
        assert!(jet_colormap(1.01).is_err());
        assert!(jet_colormap(-0.01).is_err());
    }

    #[test]
    fn hsv_canonical() {
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        let [_, s, v] = rgb_to_hsv([0.3, 0.3, 0.3]);
        assert_eq!((s, v), (0.0, 0.3));
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for i in 0..3 {
                assert!((back[i] - c[i]).abs() < 1e-6, "{c:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn jet_hue_monotone_in_band() {
        let hues: Vec<f64> = (0..=300)
            .map(|i| 0.125 + 0.75 * i as f64 / 300.0)
            .map(|v| rgb_to_hsv(jet_colormap(v).unwrap())[0])
            .collect();
        assert!(hues.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{hues:?}");
        assert!(hues[0] > hues[300]);
    }

    #[test]
    fn zero_probability_is_plain_gray() {
        let img = image(Array2::from_shape_fn((5, 6), |(y, x)| (y * 6 + x) as f64 / 30.0));
        let map = render_infection_map(&img, &prob(Array2::zeros((5, 6))), 0.01).unwrap();
        for ((y, x), &g) in img.pixels.indexed_iter() {
            for c in 0..3 {
                assert_eq!(map.rgb[(y, x, c)], g);
            }
        }
    }

    #[test]
    fn single_hot_pixel() {
        let img = image(Array2::from_elem((3, 3), 0.5));
        let mut p = Array2::zeros((3, 3));
        p[(1, 2)] = 1.0;
        let map = render_infection_map(&img, &prob(p), 0.01).unwrap();
        // jet(1) is pure red hue; at value 0.5 that is (0.5, 0, 0)
        assert_eq!([map.rgb[(1, 2, 0)], map.rgb[(1, 2, 1)], map.rgb[(1, 2, 2)]], [0.5, 0.0, 0.0]);
        assert_eq!([map.rgb[(0, 0, 0)], map.rgb[(0, 0, 1)], map.rgb[(0, 0, 2)]], [0.5; 3]);
    }

    #[test]
    fn render_rejects_mismatch() {
        let img = image(Array2::zeros((4, 4)));
        assert!(render_infection_map(&img, &prob(Array2::zeros((4, 5))), 0.01).is_err());
        assert!(render_infection_map(&img, &prob(Array2::zeros((4, 4))), 1.0).is_err());
    }

    #[test]
    fn detection_boundaries() {
        let mut p = Array2::zeros((4, 4));
        assert!(!detect(&prob(p.clone()), 0.5, 1));
        p[(2, 1)] = 0.499;
        assert!(!detect(&prob(p.clone()), 0.5, 1));
        p[(2, 1)] = 0.5;
        assert!(detect(&prob(p.clone()), 0.5, 1));
        assert!(!detect(&prob(p), 0.5, 2));
    }

    #[test]
    fn detect_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>() * 0.52);
            let any = p.iter().any(|&v| v >= 0.5);
            assert_eq!(detect(&prob(p), 0.5, 1), any);
        }
    }

    fn brute(probs: &[ProbMask], gts: &[SegMask], t: f64) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in probs.iter().zip(gts) {
            for (a, b) in p.pixels.iter().zip(g.pixels.iter()) {
                match (*a >= t, *b >= 0.5) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    #[test]
    fn pr_curve_against_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = prob(Array2::from_shape_fn((8, 8), |_| (rng.random::<f64>() * 20.0).round() / 20.0));
        let g = SegMask {
            image_id: "t/1".into(),
            pixels: Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4) as u8 as f64),
            provenance: Provenance::Manual,
        };
        let thresholds: Vec<f64> = (0..=21).map(|i| i as f64 / 20.0).collect();
        let curve = pr_curve(std::slice::from_ref(&p), std::slice::from_ref(&g), &thresholds).unwrap();
        for pt in &curve {
            let (tp, fp, fn_) = brute(std::slice::from_ref(&p), std::slice::from_ref(&g), pt.threshold);
            assert_eq!(pt.recall, Some(tp as f64 / (tp + fn_) as f64));
            assert_eq!(pt.precision, (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64));
        }
        assert!(curve.windows(2).all(|w| w[1].recall <= w[0].recall));
        assert_eq!(curve[0].recall, Some(1.0));
        assert_eq!(curve.last().unwrap().recall, Some(0.0));
    }

    #[test]
    fn writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(Array2::from_elem((8, 8), 0.25));
        let mut p = Array2::zeros((8, 8));
        p[(3, 3)] = 0.9;
        p[(3, 4)] = 0.6;
        let rec = write_outputs(dir.path(), &img, &prob(p), RenderOptions::default()).unwrap();
        assert!(rec.detected);
        assert_eq!(rec.positive_px, 2);
        assert!(dir.path().join("t_1_infmap.png").exists());
        let back = pngio::read_gray(&dir.path().join("t_1_prob.png")).unwrap();
        assert!((back[(3, 3)] - 0.9).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn value_channel_preserved(vals in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 16)) {
            let img = image(Array2::from_shape_fn((4, 4), |(y, x)| vals[y * 4 + x].0));
            let p = prob(Array2::from_shape_fn((4, 4), |(y, x)| vals[y * 4 + x].1));
            let map = render_infection_map(&img, &p, 0.01).unwrap();
            for ((y, x), &g) in img.pixels.indexed_iter() {
                let rgb = [map.rgb[(y, x, 0)], map.rgb[(y, x, 1)], map.rgb[(y, x, 2)]];
                prop_assert!((rgb_to_hsv(rgb)[2] - g).abs() < 1e-6);
                if p.pixels[(y, x)] <= 0.01 {
                    let q = |v: f64| pngio::quantize(v, 255);
                    prop_assert!(rgb.iter().all(|&c| q(c) == q(g)));
                }
            }
        }
    }
}
