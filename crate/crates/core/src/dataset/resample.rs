use ndarray::Array2;

use super::CxrImage;
use crate::{Error, Result};

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample at fractional `(y, x)`; coordinates outside the image are
/// clamped to the nearest edge.
pub fn sample_clamped(field: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = field.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = lerp(field[[y0, x0]], field[[y0, x1]], tx);
    let bottom = lerp(field[[y1, x0]], field[[y1, x1]], tx);
    lerp(top, bottom, ty)
}

/// Bilinear resize with aligned corners: output corner samples coincide with
/// input corners.
pub fn resize_bilinear(field: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = field.dim();
    if (h, w) == (out_h, out_w) {
        return field.clone();
    }
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| sample_clamped(field, y as f64 * sy, x as f64 * sx))
}

/// Resizes to `size x size` and clamps intensities to `[0, 1]`.
pub fn normalize(image: &CxrImage, size: usize) -> Result<CxrImage> {
    if size < 8 {
        return Err(Error::invalid("size", format!("{size} is below the minimum of 8")));
    }
    if image.pixels.is_empty() {
        return Err(Error::invalid("image", format!("`{}` has no pixels", image.id)));
    }
    let mut pixels = resize_bilinear(&image.pixels, size, size);
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(CxrImage {
        pixels,
        ..image.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, SourceFormat};
    use ndarray::array;

    fn img(pixels: Array2<f64>) -> CxrImage {
        CxrImage {
            id: "t".into(),
            pixels,
            source: "test".into(),
            label: Label::Control,
            original_format: SourceFormat::Png,
        }
    }

    #[test]
    fn same_size_is_bit_identical() {
        let px = Array2::from_shape_fn((224, 224), |(y, x)| ((y * 31 + x * 17) % 255) as f64 / 255.0);
        let out = normalize(&img(px.clone()), 224).unwrap();
        assert_eq!(out.pixels, px);
    }

    #[test]
    fn constant_is_a_fixed_point() {
        let v = 0.3137;
        let out = normalize(&img(Array2::from_elem((448, 448), v)), 224).unwrap();
        assert!(out.pixels.iter().all(|&p| p == v));
    }

    #[test]
    fn two_by_two_upsample_by_hand() {
        let out = normalize(&img(array![[0.0, 1.0], [1.0, 0.0]]), 8).unwrap().pixels;
        // corners preserved
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 7]], 1.0);
        assert_eq!(out[[7, 0]], 1.0);
        assert_eq!(out[[7, 7]], 0.0);
        // size 4 grid: sample (1/3, 1/3) -> 2 * (1/3)(2/3) = 4/9
        let out4 = resize_bilinear(&array![[0.0, 1.0], [1.0, 0.0]], 4, 4);
        assert!((out4[[1, 1]] - 4.0 / 9.0).abs() < 1e-12);
        assert!((out4[[1, 2]] - 5.0 / 9.0).abs() < 1e-12);
        assert!((out4[[2, 2]] - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(out4[[0, 3]], 1.0);
    }

    #[test]
    fn rejects_tiny_sizes() {
        assert!(normalize(&img(Array2::zeros((4, 4))), 7).is_err());
    }
}
