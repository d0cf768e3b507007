//! Procedural part-based image dataset.
//!
//! Every object shares the same layout: a round head, an elliptical body and
//! a tail. A class is one combination of head color, body texture and tail
//! shape, so classes differ only in local attributes. Pose jitter, clutter
//! drawn from the same palette and pixel noise keep raw pixels from giving
//! the class away.
//!
//! A sample is a pure function of `(spec, split, index)`: each one is drawn
//! from its own ChaCha stream keyed on those three values.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::localization::BoundingBox;
use crate::tensor::Tensor;
use crate::wire::{ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 4] = b"WSBD";
pub const DATASET_VERSION: u32 = 1;
/// Marks the optional per-sample part-center block after the last sample.
pub const DIAGNOSTICS_MAGIC: &[u8; 4] = b"DIAG";

/// Number of parts every object is drawn with.
pub const PARTS: usize = 3;
/// Largest attribute alphabet; caps the class count at `4³`.
const MAX_ATTRIBUTE_VALUES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(code: u8, offset: usize) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            _ => Err(Error::Format {
                offset,
                message: format!("unknown split code {code}"),
            }),
        }
    }

    fn stream_key(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e5f_7374,
            Split::Test => 0x7465_7374_5f73_7472,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Side length of the square RGB images.
    pub image_size: usize,
    /// Maximum object-center offset as a fraction of the image size.
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Mean number of background distractor shapes.
    pub clutter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Probability that a training image has one part erased.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_samples: 2048,
            test_samples: 512,
            image_size: 64,
            translate: 0.15,
            scale_min: 0.8,
            scale_max: 1.2,
            rotation_deg: 20.0,
            clutter: 4.0,
            noise_sigma: 0.03,
            occlusion: 0.0,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    /// Values per attribute: the smallest `r` with `r³ ≥ num_classes`.
    pub fn attribute_values(&self) -> usize {
        (1..=MAX_ATTRIBUTE_VALUES)
            .find(|r| r * r * r >= self.num_classes)
            .unwrap_or(MAX_ATTRIBUTE_VALUES)
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let cap = MAX_ATTRIBUTE_VALUES.pow(3);
        if self.num_classes < 2 || self.num_classes > cap {
            return bad(format!("num_classes {} outside [2, {cap}]", self.num_classes));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} below 16", self.image_size));
        }
        if !(0.0..=0.25).contains(&self.translate) {
            return bad(format!("translate {} outside [0, 0.25]", self.translate));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.5) {
            return bad(format!("scale range [{}, {}] invalid", self.scale_min, self.scale_max));
        }
        if !(0.0..=90.0).contains(&self.rotation_deg) {
            return bad(format!("rotation_deg {} outside [0, 90]", self.rotation_deg));
        }
        if !(0.0..=64.0).contains(&self.clutter) {
            return bad(format!("clutter {} outside [0, 64]", self.clutter));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return bad(format!("noise_sigma {} outside [0, 1]", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return bad(format!("occlusion {} outside [0, 1]", self.occlusion));
        }
        Ok(())
    }

    /// `(head color, body texture, tail shape)` for a class.
    pub fn attributes(&self, label: usize) -> [usize; 3] {
        let r = self.attribute_values();
        [label % r, (label / r) % r, label / (r * r)]
    }

    fn write(&self, w: &mut ByteWriter) {
        for v in [self.num_classes, self.train_samples, self.test_samples, self.image_size] {
            w.u32(v as u32);
        }
        for v in [
            self.translate,
            self.scale_min,
            self.scale_max,
            self.rotation_deg,
            self.clutter,
            self.noise_sigma,
            self.occlusion,
        ] {
            w.f64(v);
        }
        w.u64(self.seed);
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let mut u = || r.u32().map(|v| v as usize);
        let (num_classes, train_samples, test_samples, image_size) = (u()?, u()?, u()?, u()?);
        let mut f = [0.0; 7];
        for v in &mut f {
            *v = r.f64()?;
        }
        let seed = r.u64()?;
        Ok(Self {
            num_classes,
            train_samples,
            test_samples,
            image_size,
            translate: f[0],
            scale_min: f[1],
            scale_max: f[2],
            rotation_deg: f[3],
            clutter: f[4],
            noise_sigma: f[5],
            occlusion: f[6],
            seed,
        })
    }

    /// Human-readable `key = value` listing.
    pub fn manifest(&self) -> String {
        format!(
            "num_classes = {}\ntrain_samples = {}\ntest_samples = {}\nimage_size = {}\n\
             translate = {}\nscale_min = {}\nscale_max = {}\nrotation_deg = {}\n\
             clutter = {}\nnoise_sigma = {}\nocclusion = {}\nseed = {}\n",
            self.num_classes,
            self.train_samples,
            self.test_samples,
            self.image_size,
            self.translate,
            self.scale_min,
            self.scale_max,
            self.rotation_deg,
            self.clutter,
            self.noise_sigma,
            self.occlusion,
            self.seed,
        )
    }
}

/// Ground-truth center of one rendered part, in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartCenter {
    pub part: u32,
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[s, s, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Tight pixel-aligned box over every rendered part pixel.
    pub object_box: BoundingBox,
    /// Evaluation-only diagnostics.
    pub part_centers: Vec<PartCenter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<SyntheticSample>,
}

/// Images and labels only. Everything on the learning path consumes this
/// view, so it has no access to boxes or part locations.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImages<'a> {
    pub(crate) samples: &'a [SyntheticSample],
    pub(crate) classes: usize,
}

impl<'a> LabeledImages<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &'a Tensor<f32> {
        &self.samples[i].image
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    /// Stacks the selected images into `[b, s, s, 3]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled_images(&self) -> LabeledImages<'_> {
        LabeledImages {
            samples: &self.samples,
            classes: self.spec.num_classes,
        }
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.samples.iter().map(|s| s.object_box).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        self.spec.write(&mut w);
        w.u8(self.split.code());
        w.u32(self.samples.len() as u32);
        for s in &self.samples {
            w.u32(s.label as u32);
            let b = s.object_box;
            for v in [b.x0, b.y0, b.x1, b.y1] {
                w.f32(v as f32);
            }
            s.image.write_wsbt(&mut w);
        }
        if self.samples.iter().any(|s| !s.part_centers.is_empty()) {
            w.bytes(DIAGNOSTICS_MAGIC);
            for s in &self.samples {
                w.u32(s.part_centers.len() as u32);
                for c in &s.part_centers {
                    w.u32(c.part);
                    w.f32(c.x);
                    w.f32(c.y);
                }
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: at,
                message: format!("unsupported dataset version {version}"),
            });
        }
        let spec = DatasetSpec::read(&mut r)?;
        let at = r.offset();
        let split = Split::from_code(r.u8()?, at)?;
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset();
            let label = r.u32()? as usize;
            if label >= spec.num_classes {
                return Err(Error::Format {
                    offset: at,
                    message: format!("label {label} outside {} classes", spec.num_classes),
                });
            }
            let at = r.offset();
            let mut c = [0.0; 4];
            for v in &mut c {
                *v = r.f32()? as f64;
            }
            let object_box = BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
            let image = Tensor::read_wsbt(&mut r)?;
            samples.push(SyntheticSample {
                image,
                label,
                object_box,
                part_centers: Vec::new(),
            });
        }
        if !r.is_at_end() {
            r.expect_magic(DIAGNOSTICS_MAGIC)?;
            for s in &mut samples {
                let at = r.offset();
                let n = r.u32()? as usize;
                if n > PARTS {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("{n} part centers, objects have {PARTS} parts"),
                    });
                }
                for _ in 0..n {
                    s.part_centers.push(PartCenter {
                        part: r.u32()?,
                        x: r.f32()?,
                        y: r.f32()?,
                    });
                }
            }
        }
        if !r.is_at_end() {
            return Err(Error::Format {
                offset: r.offset(),
                message: "trailing bytes after last sample".into(),
            });
        }
        Ok(Self { spec, split, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream that renders one sample.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ split.stream_key()) ^ index as u64)
}

/// Labels cycle through the classes, so class counts differ by at most one.
pub fn label_of(spec: &DatasetSpec, index: usize) -> usize {
    index % spec.num_classes
}

pub fn generate(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.samples(split))
        .map(|i| render_sample(spec, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        split,
        samples,
    })
}

const BACKGROUND: [f64; 3] = [0.45, 0.45, 0.45];
const BODY: [f64; 3] = [0.62, 0.5, 0.34];
const TAIL: [f64; 3] = [0.9, 0.8, 0.25];
const HEAD_COLORS: [[f64; 3]; MAX_ATTRIBUTE_VALUES] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.35, 0.85],
    [0.25, 0.7, 0.3],
    [0.65, 0.3, 0.75],
];

// Canonical geometry at 64 px, object frame with +x towards the head.
const BODY_AXES: (f64, f64) = (11.0, 7.0);
const HEAD_CENTER: (f64, f64) = (14.0, -4.0);
const HEAD_RADIUS: f64 = 5.5;
const TAIL_CENTER: (f64, f64) = (-15.5, 0.0);
const TAIL_SIZE: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    /// Pixels per canonical unit.
    scale: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn to_object(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.cx) / self.scale, (y - self.cy) / self.scale);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (dx, dy) = (self.cos * u - self.sin * v, self.sin * u + self.cos * v);
        (self.cx + dx * self.scale, self.cy + dy * self.scale)
    }
}

fn in_tail(shape: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - TAIL_CENTER.0, v - TAIL_CENTER.1);
    let s = TAIL_SIZE;
    match shape {
        // Triangle pointing away from the body.
        0 => du >= -s && du <= s && dv.abs() <= (s - du) * 0.5 * 1.1,
        // Square.
        1 => du.abs() <= s * 0.85 && dv.abs() <= s * 0.85,
        // Diamond.
        2 => du.abs() + dv.abs() <= s * 1.1,
        // Fork: two prongs.
        _ => du.abs() <= s && (dv.abs() - s * 0.55).abs() <= s * 0.35,
    }
}

fn body_shade(texture: usize, u: f64, v: f64) -> f64 {
    match texture {
        0 => 1.0,
        // Bands across the body.
        1 => {
            if (u / 2.5).floor().rem_euclid(2.0) == 0.0 {
                1.0
            } else {
                0.55
            }
        }
        // Spots on a grid.
        2 => {
            let (fu, fv) = ((u / 5.0).round() * 5.0, (v / 5.0).round() * 5.0);
            if (u - fu).powi(2) + (v - fv).powi(2) <= 2.0 {
                0.45
            } else {
                1.0
            }
        }
        // Checkerboard.
        _ => {
            if ((u / 3.0).floor() + (v / 3.0).floor()).rem_euclid(2.0) == 0.0 {
                1.0
            } else {
                0.6
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Renders sample `index` of a split.
pub fn render_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<SyntheticSample> {
    let s = spec.image_size;
    let sf = s as f64;
    let unit = sf / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index));
    let label = label_of(spec, index);
    let [head, texture, tail] = spec.attributes(label);

    let angle = uniform(&mut rng, -spec.rotation_deg, spec.rotation_deg).to_radians();
    let pose = Pose {
        cx: sf / 2.0 + uniform(&mut rng, -spec.translate, spec.translate) * sf,
        cy: sf / 2.0 + uniform(&mut rng, -spec.translate, spec.translate) * sf,
        scale: uniform(&mut rng, spec.scale_min, spec.scale_max) * unit,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let erased = if split == Split::Train && spec.occlusion > 0.0 && rng.gen::<f64>() < spec.occlusion {
        Some(rng.gen_range(0..PARTS))
    } else {
        None
    };

    let mut px = vec![0.0f64; s * s * 3];
    for p in px.chunks_exact_mut(3) {
        p.copy_from_slice(&BACKGROUND);
    }

    let palette = [HEAD_COLORS[0], HEAD_COLORS[1], BODY, TAIL];
    let shapes = if spec.clutter > 0.0 {
        rng.gen_range(0..=(2.0 * spec.clutter).round() as usize)
    } else {
        0
    };
    for _ in 0..shapes {
        let (x, y) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
        let r = uniform(&mut rng, 1.5, 4.0) * unit;
        let color = palette[rng.gen_range(0..palette.len())];
        let round = rng.gen::<bool>();
        let (lo_y, hi_y) = (((y - r).floor().max(0.0)) as usize, ((y + r).ceil().min(sf - 1.0)) as usize);
        let (lo_x, hi_x) = (((x - r).floor().max(0.0)) as usize, ((x + r).ceil().min(sf - 1.0)) as usize);
        for i in lo_y..=hi_y {
            for j in lo_x..=hi_x {
                let (dx, dy) = (j as f64 + 0.5 - x, i as f64 + 0.5 - y);
                let inside = if round {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r
                };
                if inside {
                    px[(i * s + j) * 3..(i * s + j) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }

    let mut drawn = [false; PARTS];
    let (mut r0, mut c0, mut r1, mut c1) = (s, s, 0, 0);
    for i in 0..s {
        for j in 0..s {
            let (u, v) = pose.to_object(j as f64 + 0.5, i as f64 + 0.5);
            let hit = if erased != Some(0)
                && (u - HEAD_CENTER.0).powi(2) + (v - HEAD_CENTER.1).powi(2) <= HEAD_RADIUS * HEAD_RADIUS
            {
                Some((0, HEAD_COLORS[head]))
            } else if erased != Some(1) && (u / BODY_AXES.0).powi(2) + (v / BODY_AXES.1).powi(2) <= 1.0 {
                let k = body_shade(texture, u, v);
                Some((1, [BODY[0] * k, BODY[1] * k, BODY[2] * k]))
            } else if erased != Some(2) && in_tail(tail, u, v) {
                Some((2, TAIL))
            } else {
                None
            };
            if let Some((part, color)) = hit {
                drawn[part] = true;
                px[(i * s + j) * 3..(i * s + j) * 3 + 3].copy_from_slice(&color);
                r0 = r0.min(i);
                c0 = c0.min(j);
                r1 = r1.max(i);
                c1 = c1.max(j);
            }
        }
    }
    if r1 < r0 {
        return Err(Error::DegenerateOutput { op: "render_sample" });
    }

    if spec.noise_sigma > 0.0 {
        for v in px.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + spec.noise_sigma * z).clamp(0.0, 1.0);
        }
    }

    let object_box = BoundingBox::new(
        c0 as f64 / sf,
        r0 as f64 / sf,
        (c1 + 1) as f64 / sf,
        (r1 + 1) as f64 / sf,
    )?;
    let centers = [
        HEAD_CENTER,
        (0.0, 0.0),
        (TAIL_CENTER.0 + if tail == 0 { -TAIL_SIZE / 3.0 } else { 0.0 }, TAIL_CENTER.1),
    ];
    let part_centers = (0..PARTS)
        .filter(|&k| drawn[k])
        .map(|k| {
            let (x, y) = pose.to_image(centers[k].0, centers[k].1);
            PartCenter {
                part: k as u32,
                x: (x / sf) as f32,
                y: (y / sf) as f32,
            }
        })
        .collect();
    let image = Tensor::from_vec(&[s, s, 3], px.into_iter().map(|v| v as f32).collect())?;
    Ok(SyntheticSample {
        image,
        label,
        object_box,
        part_centers,
    })
}

/// Accuracy of classifying each test image by its nearest per-class mean
/// training image (squared Euclidean distance on raw pixels).
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let classes = train.spec.num_classes;
    let len = train.samples[0].image.len();
    let mut sums = vec![vec![0.0f64; len]; classes];
    let mut counts = vec![0usize; classes];
    for s in &train.samples {
        counts[s.label] += 1;
        for (a, &v) in sums[s.label].iter_mut().zip(s.image.data()) {
            *a += v as f64;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        sum.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let mut best = (f64::INFINITY, 0);
            for (c, mean) in sums.iter().enumerate() {
                let d: f64 = mean.iter().zip(s.image.data()).map(|(&m, &v)| (m - v as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            train_samples: 24,
            test_samples: 8,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), Split::Train).unwrap();
        let b = generate(&small(), Split::Train).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn splits_use_different_streams() {
        let spec = small();
        let tr = render_sample(&spec, Split::Train, 0).unwrap();
        let te = render_sample(&spec, Split::Test, 0).unwrap();
        assert_ne!(tr.image, te.image);
    }

    #[test]
    fn no_jitter_gives_identical_class_images() {
        let spec = DatasetSpec {
            translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotation_deg: 0.0,
            clutter: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let d = generate(&spec, Split::Train).unwrap();
        for s in &d.samples[8..] {
            assert_eq!(s.image, d.samples[s.label].image);
        }
        assert_ne!(d.samples[0].image, d.samples[1].image);
    }

    #[test]
    fn boxes_cover_part_centers_and_pixels_stay_in_range() {
        let d = generate(&small(), Split::Train).unwrap();
        for s in &d.samples {
            assert_eq!(s.part_centers.len(), PARTS);
            for c in &s.part_centers {
                assert!(s.object_box.contains_point(c.x as f64, c.y as f64), "{c:?} {:?}", s.object_box);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_are_balanced() {
        let spec = DatasetSpec {
            train_samples: 29,
            ..small()
        };
        let d = generate(&spec, Split::Train).unwrap();
        let mut counts = vec![0; 8];
        d.samples.iter().for_each(|s| counts[s.label] += 1);
        let target = 29.0 / 8.0;
        assert!(counts.iter().all(|&c| (c as f64 - target).abs() <= 1.0), "{counts:?}");
    }

    #[test]
    fn label_decomposes_into_attributes() {
        let spec = DatasetSpec::default();
        assert_eq!(spec.attribute_values(), 2);
        let all: Vec<[usize; 3]> = (0..8).map(|l| spec.attributes(l)).collect();
        for (i, a) in all.iter().enumerate() {
            assert!(all[i + 1..].iter().all(|b| b != a));
        }
        let big = DatasetSpec {
            num_classes: 27,
            ..spec
        };
        assert_eq!(big.attribute_values(), 3);
    }

    #[test]
    fn occlusion_erases_training_parts_only() {
        let spec = DatasetSpec {
            occlusion: 1.0,
            ..small()
        };
        let tr = generate(&spec, Split::Train).unwrap();
        assert!(tr.samples.iter().all(|s| s.part_centers.len() == PARTS - 1));
        let te = generate(&spec, Split::Test).unwrap();
        assert!(te.samples.iter().all(|s| s.part_centers.len() == PARTS));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = generate(&small(), Split::Test).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn diagnostics_block_is_optional_and_trailing() {
        let d = generate(&small(), Split::Test).unwrap();
        let mut bare = d.clone();
        for s in &mut bare.samples {
            s.part_centers.clear();
        }
        let bare_bytes = bare.to_bytes();
        let full_bytes = d.to_bytes();
        assert_eq!(&full_bytes[..bare_bytes.len()], &bare_bytes[..]);
        assert_eq!(&full_bytes[bare_bytes.len()..bare_bytes.len() + 4], DIAGNOSTICS_MAGIC);
        assert_eq!(Dataset::from_bytes(&bare_bytes).unwrap(), bare);
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let bytes = generate(&small(), Split::Test).unwrap().to_bytes();
        match Dataset::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset < bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Dataset::from_bytes(&bad) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            DatasetSpec { num_classes: 1, ..small() },
            DatasetSpec { num_classes: 65, ..small() },
            DatasetSpec { scale_min: 1.3, ..small() },
            DatasetSpec { noise_sigma: -0.1, ..small() },
            DatasetSpec { image_size: 8, ..small() },
        ] {
            assert!(generate(&spec, Split::Train).is_err(), "{spec:?}");
        }
    }
}
