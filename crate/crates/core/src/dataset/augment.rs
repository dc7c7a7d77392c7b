use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resample::sample_clamped;
use super::{CxrImage, Label, Sample, SegMask};
use crate::{exec, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    /// Replicate the nearest edge pixel.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub max_shift_fraction: f64,
    pub max_rotation_deg: f64,
    pub fill: FillMode,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_shift_fraction: 0.10,
            max_rotation_deg: 10.0,
            fill: FillMode::Nearest,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn new(max_shift_fraction: f64, max_rotation_deg: f64, seed: u64) -> Result<Self> {
        let p = Self {
            max_shift_fraction,
            max_rotation_deg,
            fill: FillMode::Nearest,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.max_shift_fraction) {
            return Err(Error::invalid(
                "max_shift_fraction",
                format!("{} not in [0, 1)", self.max_shift_fraction),
            ));
        }
        if !(self.max_rotation_deg >= 0.0) {
            return Err(Error::invalid(
                "max_rotation_deg",
                format!("{} is negative", self.max_rotation_deg),
            ));
        }
        Ok(())
    }
}

/// Rigid transform about the image centre: rotate by `rotation_deg`
/// (counter-clockwise in image coordinates), then translate by
/// `(shift_x, shift_y)` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        shift_x: 0.0,
        shift_y: 0.0,
        rotation_deg: 0.0,
    };

    /// Draws shifts and angle uniformly in `[-max, +max]`.
    pub fn sample(params: &AugmentParams, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |max: f64| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        Transform {
            shift_x: uniform(params.max_shift_fraction * width as f64),
            shift_y: uniform(params.max_shift_fraction * height as f64),
            rotation_deg: uniform(params.max_rotation_deg),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Source coordinate `(y, x)` sampled for output pixel `(y, x)`.
    pub fn source_of(&self, y: f64, x: f64, height: usize, width: usize) -> (f64, f64) {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dy, dx) = (y - cy - self.shift_y, x - cx - self.shift_x);
        // inverse rotation
        (cy - s * dx + c * dy, cx + c * dx + s * dy)
    }
}

/// Resamples `field` under `t` with bilinear interpolation and nearest-edge
/// fill.
pub fn warp_field(field: &Array2<f64>, t: &Transform) -> Array2<f64> {
    if t.is_identity() {
        return field.clone();
    }
    let (h, w) = field.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = t.source_of(y as f64, x as f64, h, w);
        sample_clamped(field, sy, sx)
    })
}

/// Applies a fixed transform to an image and, if given, its mask. The mask
/// is re-binarized at 0.5 after interpolation.
pub fn augment_with(image: &CxrImage, mask: Option<&SegMask>, t: &Transform) -> Result<(CxrImage, Option<SegMask>)> {
    if let Some(m) = mask {
        if m.pixels.dim() != image.pixels.dim() {
            let (a, b) = (image.pixels.dim(), m.pixels.dim());
            return Err(Error::ShapeMismatch {
                expected: vec![a.0, a.1],
                got: vec![b.0, b.1],
            });
        }
    }
    let out_img = CxrImage {
        pixels: warp_field(&image.pixels, t),
        ..image.clone()
    };
    let out_mask = mask.map(|m| SegMask {
        pixels: warp_field(&m.pixels, t).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        ..m.clone()
    });
    Ok((out_img, out_mask))
}

/// Random shift + rotation applied identically to image and mask.
pub fn augment(
    image: &CxrImage,
    mask: Option<&SegMask>,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<(CxrImage, Option<SegMask>)> {
    let t = Transform::sample(params, image.height(), image.width(), rng);
    augment_with(image, mask, &t)
}

/// Expands the minority class to `target_count` samples with augmented
/// copies. Originals are kept in order; copy `j` is derived from original
/// `j mod n` with its own seeded stream, so the output depends only on
/// `(items, target_count, params, seed)`.
pub fn balance_training_set(items: Vec<Sample>, target_count: usize, params: &AugmentParams, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    let count = |l: Label| items.iter().filter(|s| s.label() == l).count();
    let (covid, control) = (count(Label::Covid), count(Label::Control));
    let minority = if control > 0 && control < covid { Label::Control } else { Label::Covid };
    let current = count(minority);
    if target_count < current {
        return Err(Error::invalid(
            "target_count",
            format!("{target_count} is below the current {} count {current}", minority.as_str()),
        ));
    }
    if target_count == current {
        return Ok(items);
    }
    if current == 0 {
        return Err(Error::invalid("items", format!("no {} samples to augment", minority.as_str())));
    }
    let originals: Vec<&Sample> = items.iter().filter(|s| s.label() == minority).collect();
    let extra = target_count - current;
    let copies = exec::map_range(extra, |j| {
        let src = originals[j % originals.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(params.seed).wrapping_mul(0x2545_F491_4F6C_DD1D) ^ j as u64);
        let (mut image, mut mask) = augment(&src.image, src.mask.as_ref(), params, &mut rng)?;
        image.id = format!("{}#aug{j}", src.image.id);
        if let Some(m) = mask.as_mut() {
            m.image_id = image.id.clone();
        }
        Ok::<_, Error>(Sample { image, mask })
    });
    let mut out = items;
    for c in copies {
        out.push(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, SourceFormat};

    fn image(pixels: Array2<f64>, label: Label, id: &str) -> CxrImage {
        CxrImage {
            id: id.into(),
            pixels,
            source: "t".into(),
            label,
            original_format: SourceFormat::Png,
        }
    }

    #[test]
    fn zero_params_is_identity() {
        let px = Array2::from_shape_fn((12, 10), |(y, x)| (y * 10 + x) as f64 / 120.0);
        let img = image(px.clone(), Label::Covid, "a");
        let mask = SegMask {
            image_id: "a".into(),
            pixels: px.mapv(|v| (v > 0.5) as u8 as f64),
            provenance: Provenance::Manual,
        };
        let p = AugmentParams::new(0.0, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (oi, om) = augment(&img, Some(&mask), &p, &mut rng).unwrap();
        assert_eq!(oi, img);
        assert_eq!(om.unwrap(), mask);
    }

    #[test]
    fn shift_replicates_edge_column() {
        // 10x10 ramp; +10% horizontal shift is one column
        let px = Array2::from_shape_fn((10, 10), |(_, x)| x as f64 / 9.0);
        let t = Transform {
            shift_x: 1.0,
            shift_y: 0.0,
            rotation_deg: 0.0,
        };
        let out = warp_field(&px, &t);
        for y in 0..10 {
            assert_eq!(out[[y, 0]], px[[y, 0]]);
            for x in 1..10 {
                assert!((out[[y, x]] - px[[y, x - 1]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masks_stay_binary_under_rotation() {
        let px = Array2::from_shape_fn((16, 16), |(y, x)| ((y as f64 - 7.5).hypot(x as f64 - 7.5) < 5.0) as u8 as f64);
        let img = image(px.clone(), Label::Covid, "a");
        let mask = SegMask {
            image_id: "a".into(),
            pixels: px,
            provenance: Provenance::Manual,
        };
        let p = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (_, m) = augment(&img, Some(&mask), &p, &mut rng).unwrap();
            assert!(m.unwrap().is_binary());
        }
    }

    #[test]
    fn image_and_mask_share_displacement_field() {
        // Encode coordinates in the image; the mask is a half-plane whose
        // warped boundary must follow the image's displacement.
        let (h, w) = (20, 24);
        let t = Transform {
            shift_x: 1.7,
            shift_y: -2.2,
            rotation_deg: 8.0,
        };
        let xs = Array2::from_shape_fn((h, w), |(_, x)| x as f64);
        let ys = Array2::from_shape_fn((h, w), |(y, _)| y as f64);
        let wx = warp_field(&xs, &t);
        let wy = warp_field(&ys, &t);
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let (sy, sx) = t.source_of(y as f64, x as f64, h, w);
                if sy > 0.0 && sy < (h - 1) as f64 && sx > 0.0 && sx < (w - 1) as f64 {
                    assert!((wx[[y, x]] - sx).abs() < 1e-9);
                    assert!((wy[[y, x]] - sy).abs() < 1e-9);
                }
            }
        }
        let half = Array2::from_shape_fn((h, w), |(_, x)| (x >= 12) as u8 as f64);
        let img = image(xs.clone(), Label::Covid, "a");
        let mask = SegMask {
            image_id: "a".into(),
            pixels: half.clone(),
            provenance: Provenance::Manual,
        };
        let (oi, om) = augment_with(&img, Some(&mask), &t).unwrap();
        let om = om.unwrap();
        for y in 0..h {
            for x in 0..w {
                // the image carries source x; the mask must agree with the
                // half-plane test on that source coordinate (away from the edge)
                let src_x = oi.pixels[[y, x]];
                if (src_x - 11.5).abs() > 0.6 {
                    assert_eq!(om.pixels[[y, x]], (src_x >= 11.5) as u8 as f64, "({y},{x}) src {src_x}");
                }
            }
        }
    }

    fn small_sample(id: &str, label: Label) -> Sample {
        let px = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) % 3) as f64 / 2.0);
        Sample {
            image: image(px, label, id),
            mask: None,
        }
    }

    #[test]
    fn balancing_reaches_target_counts() {
        for (originals, target) in [(2361usize, 10035usize), (2078, 10000)] {
            let mut items: Vec<Sample> = (0..originals).map(|i| small_sample(&format!("c{i}"), Label::Covid)).collect();
            items.extend((0..originals + 10).map(|i| small_sample(&format!("n{i}"), Label::Control)));
            let out = balance_training_set(items, target, &AugmentParams::default(), 5).unwrap();
            assert_eq!(out.iter().filter(|s| s.label() == Label::Covid).count(), target);
            assert_eq!(out[0].image.id, "c0");
        }
    }

    #[test]
    fn balancing_boundaries() {
        let items: Vec<Sample> = (0..4)
            .map(|i| small_sample(&format!("c{i}"), Label::Covid))
            .chain((0..9).map(|i| small_sample(&format!("n{i}"), Label::Control)))
            .collect();
        let same = balance_training_set(items.clone(), 4, &AugmentParams::default(), 1).unwrap();
        assert_eq!(same, items);
        assert!(balance_training_set(items.clone(), 3, &AugmentParams::default(), 1).is_err());
        let a = balance_training_set(items.clone(), 9, &AugmentParams::default(), 1).unwrap();
        let b = balance_training_set(items, 9, &AugmentParams::default(), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn params_are_validated() {
        assert!(AugmentParams::new(1.0, 10.0, 0).is_err());
        assert!(AugmentParams::new(0.1, -1.0, 0).is_err());
    }
}
