//! Synthetic segmentation scenes whose labels depend on global context.
//!
//! Each image has a hidden context bit. The background is isotropic noise
//! whose mean is shifted by `+cue` or `-cue` along a fixed colour direction,
//! the only carrier of the context. Shapes are drawn on top:
//!
//! | shape    | context 0 | context 1 |
//! |----------|-----------|-----------|
//! | square   | 1         | 2         |
//! | disc     | 3         | 4         |
//! | triangle | 5         | 5         |
//! | ring     | 6         | 6         |
//!
//! A square looks the same in both contexts (same colour, same noise), so a
//! pixel classifier can only separate classes 1/2 and 3/4 by estimating the
//! background shift. With `m` background pixels in view the best achievable
//! context accuracy is `Phi(cue * sqrt(m) / noise)`; see
//! [`context_accuracy_ceiling`].

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, SegSample, IGNORE_LABEL};
use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::Container;
use crate::tensor::Tensor;
use crate::train::metrics::ConfusionMatrix;
use crate::train::{stream_rng, Stream};

pub const NUM_CLASSES: usize = 7;
pub const AMBIGUOUS_CLASSES: [usize; 4] = [1, 2, 3, 4];
pub const NUM_SHAPES: usize = 4;
pub const NO_SHAPE: u8 = 255;

const SHAPE_COLOURS: [[f32; 3]; NUM_SHAPES] = [[1.2, 0.2, -0.6], [-0.8, 1.0, 0.4], [0.3, -1.0, 1.1], [-0.2, -0.4, -1.3]];
const CUE_DIRECTION: [f32; 3] = [0.577_350_26, -0.577_350_26, 0.577_350_26];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Per-channel standard deviation of all pixel noise.
    pub noise: f32,
    /// Background mean shift along the cue direction.
    pub cue: f32,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            shapes_min: 2,
            shapes_max: 4,
            radius_min: 5,
            radius_max: 9,
            noise: 0.5,
            cue: 0.02,
            seed: 0,
            train: 2000,
            val: 500,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(invalid("synth_spec", d));
        if self.size == 0 || self.size % 8 != 0 {
            return err(format!("size {} must be a positive multiple of 8", self.size));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return err(format!("shape count range [{}, {}] invalid", self.shapes_min, self.shapes_max));
        }
        if self.radius_min < 2 || self.radius_min > self.radius_max || 2 * self.radius_max + 2 > self.size {
            return err(format!("radius range [{}, {}] does not fit a {} image", self.radius_min, self.radius_max, self.size));
        }
        if !(self.noise > 0.0) || !(self.cue >= 0.0) || !self.noise.is_finite() || !self.cue.is_finite() {
            return err(format!("noise {} must be positive and cue {} non-negative", self.noise, self.cue));
        }
        Ok(())
    }
}

/// Label of shape `shape` under `context`.
pub fn shape_label(shape: usize, context: usize) -> i32 {
    match shape {
        0 => 1 + context as i32,
        1 => 3 + context as i32,
        2 => 5,
        _ => 6,
    }
}

/// Best context accuracy from `pixels` background pixels.
pub fn context_accuracy_ceiling(spec: &SynthSpec, pixels: usize) -> f64 {
    let z = spec.cue as f64 * (pixels as f64).sqrt() / spec.noise as f64;
    normal_cdf(z)
}

/// Standard normal CDF via the complementary error function.
fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function, rational approximation with relative error
/// below 1.2e-7 (Numerical Recipes `erfcc`).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 { r } else { 2.0 - r }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub sample: SegSample<f32>,
    pub context: usize,
    /// Shape index per pixel, [`NO_SHAPE`] on background.
    pub shapes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<SynthItem>,
    pub val: Vec<SynthItem>,
}

fn inside(shape: usize, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        0 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        1 => dy * dy + dx * dx <= r * r,
        // upward triangle inscribed in the radius box
        2 => dy >= -r && dy <= r * 0.7 && dx.abs() <= (dy + r) * 0.6,
        _ => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
    }
}

fn generate_item(spec: &SynthSpec, split: u64, index: usize) -> SynthItem {
    let mut rng = stream_rng(spec.seed, Stream::Data, split, index as u64);
    let s = spec.size;
    let context = index % 2;
    let noise = Normal::new(0.0f32, spec.noise).expect("positive noise");
    let count = rng.random_range(spec.shapes_min..=spec.shapes_max);
    let mut shapes = vec![NO_SHAPE; s * s];
    for _ in 0..count {
        let kind = rng.random_range(0..NUM_SHAPES);
        let r = rng.random_range(spec.radius_min..=spec.radius_max);
        let cy = rng.random_range(r..s - r) as f64;
        let cx = rng.random_range(r..s - r) as f64;
        for y in 0..s {
            for x in 0..s {
                if inside(kind, y as f64 - cy, x as f64 - cx, r as f64) {
                    shapes[y * s + x] = kind as u8;
                }
            }
        }
    }
    let sign = if context == 0 { 1.0 } else { -1.0 };
    let mut image = vec![0f32; 3 * s * s];
    for p in 0..s * s {
        for c in 0..3 {
            let mean = match shapes[p] {
                NO_SHAPE => sign * spec.cue * CUE_DIRECTION[c],
                k => SHAPE_COLOURS[k as usize][c],
            };
            image[c * s * s + p] = mean + noise.sample(&mut rng);
        }
    }
    let labels = shapes.iter().map(|&k| if k == NO_SHAPE { 0 } else { shape_label(k as usize, context) }).collect();
    let sample = SegSample::new(Tensor::from_vec(&[3, s, s], image), LabelMask::new(s, s, labels).expect("size")).expect("shape");
    SynthItem { sample, context, shapes }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    Ok(SynthDataset {
        spec: spec.clone(),
        train: (0..spec.train).map(|i| generate_item(spec, 0, i)).collect(),
        val: (0..spec.val).map(|i| generate_item(spec, 1, i)).collect(),
    })
}

/// Generator self-test results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAudit {
    /// Training pixel counts of classes 1..=4.
    pub ambiguous_pixels: [u64; 4],
    /// `min/max` pixel ratio of the pairs (1, 2) and (3, 4).
    pub pair_balance: [f64; 2],
    /// Mean IoU over ambiguous classes of a shape oracle told the context.
    pub oracle_with_context: f64,
    /// The same oracle assuming context 0 everywhere.
    pub oracle_without_context: f64,
    /// `(window side, context accuracy ceiling)` for square windows of
    /// background pixels.
    pub local_ceilings: Vec<(usize, f64)>,
    pub global_ceiling: f64,
}

/// Mean IoU over the ambiguous classes.
pub fn ambiguous_miou(cm: &ConfusionMatrix) -> Option<f64> {
    cm.mean_iou_over(AMBIGUOUS_CLASSES)
}

fn oracle_miou(items: &[SynthItem], use_context: bool) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for it in items {
        let ctx = if use_context { it.context } else { 0 };
        let pred: Vec<i32> = it.shapes.iter().map(|&k| if k == NO_SHAPE { 0 } else { shape_label(k as usize, ctx) }).collect();
        cm.add(&pred, &it.sample.mask.labels, IGNORE_LABEL)?;
    }
    ambiguous_miou(&cm).ok_or(Error::EmptyEvaluation)
}

pub fn audit(data: &SynthDataset) -> Result<SynthAudit> {
    let mut px = [0u64; 4];
    for it in &data.train {
        for &l in &it.sample.mask.labels {
            if (1..=4).contains(&l) {
                px[l as usize - 1] += 1;
            }
        }
    }
    let ratio = |a: u64, b: u64| a.min(b) as f64 / a.max(b).max(1) as f64;
    let eval = if data.val.is_empty() { &data.train } else { &data.val };
    let s = data.spec.size;
    Ok(SynthAudit {
        ambiguous_pixels: px,
        pair_balance: [ratio(px[0], px[1]), ratio(px[2], px[3])],
        oracle_with_context: oracle_miou(eval, true)?,
        oracle_without_context: oracle_miou(eval, false)?,
        local_ceilings: [8, 16, 32].iter().map(|&w| (w, context_accuracy_ceiling(&data.spec, w * w))).collect(),
        global_ceiling: context_accuracy_ceiling(&data.spec, s * s),
    })
}

fn push_split(c: &mut Container, name: &str, items: &[SynthItem], size: usize) -> Result<()> {
    let n = items.len();
    let mut images = Vec::with_capacity(n * 3 * size * size);
    let mut masks = Vec::with_capacity(n * size * size);
    let mut shapes = Vec::with_capacity(n * size * size);
    for it in items {
        images.extend_from_slice(it.sample.image.data());
        masks.extend(it.sample.mask.labels.iter().map(|&l| l as u8));
        shapes.extend_from_slice(&it.shapes);
    }
    c.push_real(&format!("{name}.images"), &Tensor::from_vec(&[n, 3, size, size], images))?;
    c.push_u8(&format!("{name}.masks"), &[n, size, size], &masks)?;
    c.push_u8(&format!("{name}.shapes"), &[n, size, size], &shapes)?;
    c.push_u8(&format!("{name}.contexts"), &[n], &items.iter().map(|i| i.context as u8).collect::<Vec<_>>())?;
    Ok(())
}

pub fn to_container(data: &SynthDataset) -> Result<Container> {
    let mut c = Container::new();
    c.set_metadata("kind", "synthetic-segmentation");
    c.set_metadata("spec", serde_json::to_string(&data.spec)?);
    c.set_metadata("num_classes", NUM_CLASSES.to_string());
    push_split(&mut c, "train", &data.train, data.spec.size)?;
    push_split(&mut c, "val", &data.val, data.spec.size)?;
    Ok(c)
}

fn read_split(c: &Container, name: &str) -> Result<Vec<SynthItem>> {
    let images = c.get_real::<f32>(&format!("{name}.images"))?;
    let (mshape, masks) = c.get_u8(&format!("{name}.masks"))?;
    let (_, shapes) = c.get_u8(&format!("{name}.shapes"))?;
    let (_, contexts) = c.get_u8(&format!("{name}.contexts"))?;
    let (n, h, w) = (mshape[0], mshape[1], mshape[2]);
    if images.shape() != [n, 3, h, w] || shapes.len() != n * h * w || contexts.len() != n {
        return Err(Error::Format(format!("split '{name}' has inconsistent tensor shapes")));
    }
    let plane = 3 * h * w;
    (0..n)
        .map(|i| {
            let image = Tensor::from_vec(&[3, h, w], images.data()[i * plane..(i + 1) * plane].to_vec());
            let labels = masks[i * h * w..(i + 1) * h * w].iter().map(|&b| b as i32).collect();
            Ok(SynthItem {
                sample: SegSample::new(image, LabelMask::new(h, w, labels)?)?,
                context: contexts[i] as usize,
                shapes: shapes[i * h * w..(i + 1) * h * w].to_vec(),
            })
        })
        .collect()
}

pub fn from_container(c: &Container) -> Result<SynthDataset> {
    let spec: SynthSpec = serde_json::from_str(
        c.manifest.metadata.get("spec").ok_or_else(|| Error::Format("dataset metadata lacks 'spec'".into()))?,
    )?;
    Ok(SynthDataset { spec, train: read_split(c, "train")?, val: read_split(c, "val")? })
}

pub fn write_dataset(data: &SynthDataset, path: &Path) -> Result<()> {
    to_container(data)?.write(path)
}

pub fn read_dataset(path: &Path) -> Result<SynthDataset> {
    from_container(&Container::read(path)?)
}
