//! PNG encode/decode helpers for probability maps, masks and renders.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::Array2;

use crate::{Error, Result};

/// Round-half-up quantization of a value in `[0, 1]` to `0..=max`.
pub fn quantize(v: f64, max: u16) -> u16 {
    let q = (v.clamp(0.0, 1.0) * max as f64 + 0.5).floor();
    q.min(max as f64) as u16
}

pub fn write_gray16(path: &Path, field: &Array2<f64>) -> Result<()> {
    let (h, w) = field.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize(field[[y as usize, x as usize]], u16::MAX)]));
    buf.save(path)?;
    Ok(())
}

pub fn write_gray8(path: &Path, field: &Array2<f64>) -> Result<()> {
    let (h, w) = field.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(field[[y as usize, x as usize]], 255) as u8])
    });
    buf.save(path)?;
    Ok(())
}

/// Encodes a field as 8-bit grayscale PNG bytes.
pub fn encode_gray8(field: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = field.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(field[[y as usize, x as usize]], 255) as u8])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes an `[h, w, 3]` RGB field in `[0, 1]` as 8-bit RGB.
pub fn write_rgb8(path: &Path, rgb: &ndarray::Array3<f64>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 3],
            got: vec![h, w, c],
        });
    }
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| quantize(rgb[[y, x, ch]], 255) as u8))
    });
    buf.save(path)?;
    Ok(())
}

/// Reads any grayscale-convertible PNG/JPEG into `[0, 1]`, normalizing by
/// the source bit depth.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(dynamic_to_field(&img))
}

pub fn decode_gray(bytes: &[u8]) -> Result<Array2<f64>> {
    let img = image::load_from_memory(bytes)?;
    Ok(dynamic_to_field(&img))
}

pub(crate) fn dynamic_to_field(img: &image::DynamicImage) -> Array2<f64> {
    use image::DynamicImage as D;
    match img {
        D::ImageLuma16(_) | D::ImageLumaA16(_) | D::ImageRgb16(_) | D::ImageRgba16(_) => {
            let g = img.to_luma16();
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
            })
        }
        _ => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0, 255), 1);
        assert_eq!(quantize(1.0, 255), 255);
        assert_eq!(quantize(0.0, 65535), 0);
        assert_eq!(quantize(1.0, 65535), 65535);
    }

    #[test]
    fn gray16_round_trip_is_exact_on_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let field = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) * 1000) as f64 / 65535.0);
        write_gray16(&path, &field).unwrap();
        let back = read_gray(&path).unwrap();
        assert_eq!(back, field);
    }
}
