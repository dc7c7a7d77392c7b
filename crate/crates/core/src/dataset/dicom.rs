//! Minimal DICOM reader for uncompressed monochrome images.
//!
//! Only Part-10 files with the implicit or explicit VR little-endian
//! transfer syntax, one sample per pixel, 8 or 16 bits allocated and
//! unsigned pixel representation are accepted.

use ndarray::Array2;

const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";
const IMPLICIT_LE: &str = "1.2.840.10008.1.2";

#[derive(Debug, Default)]
struct Header {
    transfer_syntax: Option<String>,
    rows: Option<u16>,
    cols: Option<u16>,
    bits_allocated: Option<u16>,
    bits_stored: Option<u16>,
    pixel_representation: Option<u16>,
    samples_per_pixel: Option<u16>,
    photometric: Option<String>,
}

fn u16_at(b: &[u8], i: usize) -> Result<u16, String> {
    b.get(i..i + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| "truncated element".to_string())
}

fn u32_at(b: &[u8], i: usize) -> Result<u32, String> {
    b.get(i..i + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| "truncated element".to_string())
}

fn text(v: &[u8]) -> String {
    String::from_utf8_lossy(v).trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string()
}

fn has_long_length(vr: &[u8]) -> bool {
    matches!(vr, b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN" | b"OD" | b"OL" | b"UC" | b"UR")
}

/// Decodes pixel data into `[0, 1]` intensities (MONOCHROME1 is inverted).
pub fn decode(bytes: &[u8]) -> Result<Array2<f64>, String> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err("missing DICM preamble".into());
    }
    let mut hdr = Header::default();
    let mut pos = 132;
    let mut pixel_data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let group = u16_at(bytes, pos)?;
        let elem = u16_at(bytes, pos + 2)?;
        let explicit = group == 0x0002 || hdr.transfer_syntax.as_deref() != Some(IMPLICIT_LE);
        let (len, header_len) = if explicit {
            let vr = &bytes[pos + 4..pos + 6];
            if has_long_length(vr) {
                (u32_at(bytes, pos + 8)?, 12)
            } else {
                (u16_at(bytes, pos + 6)? as u32, 8)
            }
        } else {
            (u32_at(bytes, pos + 4)?, 8)
        };
        if len == u32::MAX {
            return Err(format!("undefined-length element ({group:04X},{elem:04X}) unsupported"));
        }
        let start = pos + header_len;
        let end = start
            .checked_add(len as usize)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format!("element ({group:04X},{elem:04X}) overruns file"))?;
        let value = &bytes[start..end];
        match (group, elem) {
            (0x0002, 0x0010) => {
                let ts = text(value);
                if ts != EXPLICIT_LE && ts != IMPLICIT_LE {
                    return Err(format!("unsupported transfer syntax {ts}"));
                }
                hdr.transfer_syntax = Some(ts);
            }
            (0x0028, 0x0002) => hdr.samples_per_pixel = Some(u16_at(value, 0)?),
            (0x0028, 0x0004) => hdr.photometric = Some(text(value)),
            (0x0028, 0x0010) => hdr.rows = Some(u16_at(value, 0)?),
            (0x0028, 0x0011) => hdr.cols = Some(u16_at(value, 0)?),
            (0x0028, 0x0100) => hdr.bits_allocated = Some(u16_at(value, 0)?),
            (0x0028, 0x0101) => hdr.bits_stored = Some(u16_at(value, 0)?),
            (0x0028, 0x0103) => hdr.pixel_representation = Some(u16_at(value, 0)?),
            (0x7FE0, 0x0010) => {
                pixel_data = Some(value);
                break;
            }
            _ => {}
        }
        pos = end;
    }
    if hdr.transfer_syntax.is_none() {
        hdr.transfer_syntax = Some(EXPLICIT_LE.into());
    }
    let rows = hdr.rows.ok_or("missing Rows")? as usize;
    let cols = hdr.cols.ok_or("missing Columns")? as usize;
    let bits = hdr.bits_allocated.ok_or("missing BitsAllocated")?;
    let stored = hdr.bits_stored.unwrap_or(bits);
    if hdr.samples_per_pixel.unwrap_or(1) != 1 {
        return Err("only single-sample (monochrome) images are supported".into());
    }
    if hdr.pixel_representation.unwrap_or(0) != 0 {
        return Err("signed pixel representation unsupported".into());
    }
    let photometric = hdr.photometric.unwrap_or_else(|| "MONOCHROME2".into());
    let invert = match photometric.as_str() {
        "MONOCHROME2" => false,
        "MONOCHROME1" => true,
        other => return Err(format!("photometric interpretation {other} unsupported")),
    };
    let data = pixel_data.ok_or("missing PixelData")?;
    let n = rows * cols;
    let values: Vec<f64> = match bits {
        8 => {
            if data.len() < n {
                return Err("pixel data shorter than Rows x Columns".into());
            }
            data[..n].iter().map(|&v| v as f64 / 255.0).collect()
        }
        16 => {
            if data.len() < 2 * n || stored == 0 || stored > 16 {
                return Err("pixel data shorter than Rows x Columns".into());
            }
            let max = ((1u32 << stored) - 1) as f64;
            let mask = ((1u32 << stored) - 1) as u16;
            data[..2 * n]
                .chunks_exact(2)
                .map(|c| (u16::from_le_bytes([c[0], c[1]]) & mask) as f64 / max)
                .collect()
        }
        b => return Err(format!("{b} bits allocated unsupported")),
    };
    let mut field = Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())?;
    if invert {
        field.mapv_inplace(|v| 1.0 - v);
    }
    Ok(field)
}

/// Encodes a minimal explicit-VR little-endian MONOCHROME2 file. Used to
/// produce fixtures and exports.
pub fn encode_monochrome16(rows: u16, cols: u16, pixels: &[u16]) -> Vec<u8> {
    fn short(out: &mut Vec<u8>, g: u16, e: u16, vr: &[u8; 2], value: &[u8]) {
        out.extend(g.to_le_bytes());
        out.extend(e.to_le_bytes());
        out.extend(vr);
        out.extend((value.len() as u16).to_le_bytes());
        out.extend(value);
    }
    let mut out = vec![0u8; 128];
    out.extend(b"DICM");
    let mut ts = EXPLICIT_LE.as_bytes().to_vec();
    if ts.len() % 2 == 1 {
        ts.push(0);
    }
    short(&mut out, 0x0002, 0x0010, b"UI", &ts);
    short(&mut out, 0x0028, 0x0002, b"US", &1u16.to_le_bytes());
    short(&mut out, 0x0028, 0x0004, b"CS", b"MONOCHROME2 ");
    short(&mut out, 0x0028, 0x0010, b"US", &rows.to_le_bytes());
    short(&mut out, 0x0028, 0x0011, b"US", &cols.to_le_bytes());
    short(&mut out, 0x0028, 0x0100, b"US", &16u16.to_le_bytes());
    short(&mut out, 0x0028, 0x0101, b"US", &16u16.to_le_bytes());
    short(&mut out, 0x0028, 0x0103, b"US", &0u16.to_le_bytes());
    out.extend(0x7FE0u16.to_le_bytes());
    out.extend(0x0010u16.to_le_bytes());
    out.extend(b"OW");
    out.extend([0, 0]);
    out.extend(((pixels.len() * 2) as u32).to_le_bytes());
    for p in pixels {
        out.extend(p.to_le_bytes());
    }
    out
}
