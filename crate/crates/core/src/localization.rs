//! Object localization from attention maps.
//!
//! The object mask is the channel mean of the attention maps. Pixels at or
//! above `θ·max(S)` are foreground; the tight box around the largest
//! 4-connected foreground component is the prediction. Pixel `(i, j)` of an
//! `H × W` map covers `[j/W, (j+1)/W] × [i/H, (i+1)/H]` in image coordinates.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x0) && inside(y0) && inside(x1) && inside(y1) && x0 < x1 && y0 < y1) {
            return Err(Error::InvalidArgument(format!(
                "invalid box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Grows each side by `margin` times the box extent, clamped to the unit
    /// square.
    pub fn enlarge(&self, margin: f64) -> BoundingBox {
        let (dx, dy) = (self.width() * margin, self.height() * margin);
        BoundingBox {
            x0: (self.x0 - dx).max(0.0),
            y0: (self.y0 - dy).max(0.0),
            x1: (self.x1 + dx).min(1.0),
            y1: (self.y1 + dy).min(1.0),
        }
    }

    /// Pixel span `[x0, x1) × [y0, y1)` covering the box on a `w × h` grid;
    /// never empty.
    pub fn pixel_bounds(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let lo = |v: f64, n: usize| ((v * n as f64).floor() as usize).min(n - 1);
        let hi = |v: f64, n: usize, lo: usize| ((v * n as f64).ceil() as usize).clamp(lo + 1, n);
        let (px0, py0) = (lo(self.x0, w), lo(self.y0, h));
        (px0, py0, hi(self.x1, w, px0), hi(self.y1, h, py0))
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Single-channel object mask `S[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::BufferLength {
                shape: vec![height, width],
                len: values.len(),
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `S = (1/M) Σ_k a_k` for one sample's `[H, W, M]` attention.
pub fn mean_attention_map<T: Real>(attention: &Tensor<T>) -> Result<ObjectMask> {
    let s = attention.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("attention must be [H, W, M], got {s:?}")));
    }
    let (h, w, m) = (s[0], s[1], s[2]);
    let values = attention
        .data()
        .chunks_exact(m)
        .map(|px| px.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64)
        .collect();
    ObjectMask::new(h, w, values)
}

/// Pixels `(row, col)` of the selected component, plus its box.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub bbox: BoundingBox,
    pub component: Vec<(usize, usize)>,
}

/// Full localization result; the component is empty when the fallback
/// full-image box was returned.
pub fn localize_detailed(mask: &ObjectMask, theta: f64) -> Localization {
    let fallback = Localization {
        bbox: BoundingBox::FULL,
        component: Vec::new(),
    };
    let max = mask.max();
    if !(max > 0.0) {
        return fallback;
    }
    let cut = theta * max;
    let (h, w) = (mask.height, mask.width);
    let fg: Vec<bool> = mask.values.iter().map(|&v| v >= cut).collect();
    let mut seen = vec![false; h * w];
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            comp.push((i, j));
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    if best.is_empty() {
        return fallback;
    }
    let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0, 0);
    for &(i, j) in &best {
        r0 = r0.min(i);
        c0 = c0.min(j);
        r1 = r1.max(i);
        c1 = c1.max(j);
    }
    let bbox = BoundingBox {
        x0: c0 as f64 / w as f64,
        y0: r0 as f64 / h as f64,
        x1: (c1 + 1) as f64 / w as f64,
        y1: (r1 + 1) as f64 / h as f64,
    };
    Localization { bbox, component: best }
}

/// Box around the largest foreground component; the full image when the
/// mask has no positive value.
pub fn localize(mask: &ObjectMask, theta: f64) -> BoundingBox {
    localize_detailed(mask, theta).bbox
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationMetrics {
    pub miou: f64,
    /// Fraction of images whose IoU is strictly below 0.5.
    pub loc_error: f64,
}

pub fn localization_metrics(pred: &[BoundingBox], truth: &[BoundingBox]) -> Result<LocalizationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted boxes vs {} ground-truth boxes",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(LocalizationMetrics { miou: 0.0, loc_error: 0.0 });
    }
    let ious: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| iou(p, t)).collect();
    Ok(metrics_from_ious(&ious))
}

pub fn metrics_from_ious(ious: &[f64]) -> LocalizationMetrics {
    let n = ious.len() as f64;
    LocalizationMetrics {
        miou: ious.iter().sum::<f64>() / n,
        loc_error: ious.iter().filter(|&&v| v < 0.5).count() as f64 / n,
    }
}

/// One line per image: `index x0 y0 x1 y1 iou`.
pub fn format_box_list(pred: &[BoundingBox], truth: &[BoundingBox]) -> String {
    let mut out = String::new();
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let _ = writeln!(out, "{i} {} {} {} {} {}", p.x0, p.y0, p.x1, p.y1, iou(p, t));
    }
    out
}

/// Parses the box-list format back into `(index, box, iou)` rows.
pub fn parse_box_list(text: &str) -> Result<Vec<(usize, BoundingBox, f64)>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("box list line {}: {line:?}", ln + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let idx = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        rows.push((idx, BoundingBox::new(v[0], v[1], v[2], v[3])?, v[4]));
    }
    Ok(rows)
}
