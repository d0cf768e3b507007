//! Binary PPM (P6) and PGM (P5) export for images, attention maps and box
//! overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::localization::{BoundingBox, ObjectMask};
use crate::tensor::{Real, Tensor};

pub const PREDICTED_COLOR: [u8; 3] = [0, 255, 0];
pub const TRUTH_COLOR: [u8; 3] = [0, 0, 255];

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// From an `[H, W, 3]` tensor with values in `[0, 1]` (clamped).
    pub fn from_tensor<T: Real>(image: &Tensor<T>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::InvalidArgument(format!("expected [H, W, 3] image, got {s:?}")));
        }
        Ok(Self {
            height: s[0],
            width: s[1],
            pixels: image.data().iter().map(|v| quantize(v.as_f64())).collect(),
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// One-pixel outline along the edge of the box's pixel span.
    pub fn draw_box(&mut self, bbox: &BoundingBox, color: [u8; 3]) {
        let (x0, y0, x1, y1) = bbox.pixel_bounds(self.width, self.height);
        for x in x0..x1 {
            self.set(x, y0, color);
            self.set(x, y1 - 1, color);
        }
        for y in y0..y1 {
            self.set(x0, y, color);
            self.set(x1 - 1, y, color);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Min-max normalizes a map to bytes; a constant map becomes all zeros.
pub fn normalize_map(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| quantize((v - lo) / range)).collect()
}

pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn mask_pgm(mask: &ObjectMask) -> Vec<u8> {
    pgm_bytes(mask.width, mask.height, &normalize_map(&mask.values))
}

/// One PGM per channel of an `[H, W, M]` attention tensor.
pub fn attention_pgms<T: Real>(attention: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let s = attention.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("attention must be [H, W, M], got {s:?}")));
    }
    let (h, w, m) = (s[0], s[1], s[2]);
    Ok((0..m)
        .map(|k| {
            let map: Vec<f64> = attention.data().iter().skip(k).step_by(m).map(|v| v.as_f64()).collect();
            pgm_bytes(w, h, &normalize_map(&map))
        })
        .collect())
}

/// Input image with the predicted box in green and ground truth in blue.
pub fn overlay<T: Real>(image: &Tensor<T>, predicted: &BoundingBox, truth: &BoundingBox) -> Result<RgbImage> {
    let mut img = RgbImage::from_tensor(image)?;
    img.draw_box(truth, TRUTH_COLOR);
    img.draw_box(predicted, PREDICTED_COLOR);
    Ok(img)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PPM or PGM, returning `(magic, width, height, payload)`.
pub fn parse_pnm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "truncated header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |i: usize| {
        fields[i].parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad header field {:?}", fields[i]),
        })
    };
    let (w, h) = (num(1)?, num(2)?);
    Ok((fields[0].clone(), w, h, &bytes[pos.min(bytes.len())..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_black() {
        assert_eq!(normalize_map(&[0.3; 4]), vec![0; 4]);
        assert_eq!(normalize_map(&[1.0, 3.0, 2.0]), vec![0, 255, 128]);
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm_bytes(2, 1, &[7, 9]);
        assert_eq!(&bytes[..], b"P5\n2 1\n255\n\x07\x09");
        let (magic, w, h, data) = parse_pnm(&bytes).unwrap();
        assert_eq!((magic.as_str(), w, h, data), ("P5", 2, 1, &[7u8, 9][..]));
    }

    #[test]
    fn ppm_layout_and_overlay_colors() {
        let img = Tensor::<f32>::full(&[4, 4, 3], 0.5).unwrap();
        let truth = BoundingBox::FULL;
        let pred = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let o = overlay(&img, &pred, &truth).unwrap();
        assert_eq!(o.get(0, 0), TRUTH_COLOR);
        assert_eq!(o.get(1, 1), PREDICTED_COLOR);
        assert_eq!(o.get(2, 2), PREDICTED_COLOR);
        let ppm = o.to_ppm();
        assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(ppm.len(), 11 + 48);
    }

    #[test]
    fn one_pgm_per_part() {
        let a = Tensor::<f64>::from_f64_slice(&[1, 2, 2], &[0.0, 1.0, 2.0, 1.0]).unwrap();
        let maps = attention_pgms(&a).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(parse_pnm(&maps[0]).unwrap().3, &[0, 255]);
        assert_eq!(parse_pnm(&maps[1]).unwrap().3, &[0, 0]);
    }
}
