//! Binary PPM (P6) image output, plus a reader for round-trip tests.

use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

/// Encodes an `[h, w, 3]` image with values clamped to `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [h, w, 3] image");
    assert_eq!(shape[2], 3);
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(32 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").unwrap();
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

pub fn write_ppm(path: &Path, image: &Tensor) -> std::io::Result<()> {
    std::fs::write(path, encode_ppm(image))
}

/// Promotes an `[h, w]` mask/grayscale tensor to an RGB image.
pub fn gray_to_rgb(gray: &Tensor) -> Tensor {
    let shape = gray.shape();
    assert_eq!(shape.len(), 2, "expected [h, w] grayscale");
    Tensor::from_fn(&[shape[0], shape[1], 3], |i| gray.data()[i / 3])
}

/// Parses a P6 file produced by [`encode_ppm`]; values map back to
/// `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P6" {
        return Err(format!("not a P6 file: {}", fields[0]));
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    if fields[3] != "255" {
        return Err("unsupported maxval".into());
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    let data: Vec<f64> = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[h, w, 3], data))
}
