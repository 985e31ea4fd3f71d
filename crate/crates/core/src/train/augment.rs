//! Random flip, rescale, rotation and crop for segmentation samples.
//!
//! Every output pixel is mapped back through crop, rotation, scale and flip
//! to a source coordinate. Images are sampled bilinearly and padded with
//! `image_pad`; masks take the nearest label and are padded with the ignore
//! label. A pixel is padding in both exactly when its nearest source pixel
//! falls outside the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMask, SegSample, IGNORE_LABEL};
use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    /// Output side length.
    pub crop: usize,
    pub image_pad: f64,
    pub ignore_label: i32,
}

impl AugmentConfig {
    pub fn new(crop: usize) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
            max_rotation_deg: 10.0,
            crop,
            image_pad: 0.0,
            ignore_label: IGNORE_LABEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(invalid("augment", format!("scale range [{}, {}] must be positive", self.scale_min, self.scale_max)));
        }
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(invalid("augment", format!("crop {} must be a positive multiple of 8", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("augment", format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// One sampled geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub angle_deg: f64,
    /// Top-left of the crop window on the rescaled canvas; may be negative
    /// when the canvas is smaller than the crop.
    pub offset_y: i64,
    pub offset_x: i64,
}

fn canvas(size: usize, scale: f64) -> usize {
    ((size as f64 * scale).round() as usize).max(1)
}

fn offset_range(canvas: usize, crop: usize) -> (i64, i64) {
    let diff = canvas as i64 - crop as i64;
    if diff >= 0 { (0, diff) } else { (diff, 0) }
}

impl AugmentDraw {
    /// Native-size geometry with a centred window.
    pub fn identity(height: usize, width: usize, crop: usize) -> Self {
        AugmentDraw {
            flip: false,
            scale: 1.0,
            angle_deg: 0.0,
            offset_y: (height as i64 - crop as i64) / 2,
            offset_x: (width as i64 - crop as i64) / 2,
        }
    }

    pub fn sample(config: &AugmentConfig, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let flip = rng.random::<f64>() < config.flip_prob;
        let scale = if config.scale_max > config.scale_min {
            rng.random_range(config.scale_min..config.scale_max)
        } else {
            config.scale_min
        };
        let angle_deg = if config.max_rotation_deg > 0.0 {
            rng.random_range(-config.max_rotation_deg..config.max_rotation_deg)
        } else {
            0.0
        };
        let (ylo, yhi) = offset_range(canvas(height, scale), config.crop);
        let (xlo, xhi) = offset_range(canvas(width, scale), config.crop);
        AugmentDraw {
            flip,
            scale,
            angle_deg,
            offset_y: rng.random_range(ylo..=yhi),
            offset_x: rng.random_range(xlo..=xhi),
        }
    }
}

/// Applies a fixed geometry.
pub fn augment_with<T: Real>(sample: &SegSample<T>, draw: &AugmentDraw, config: &AugmentConfig) -> Result<SegSample<T>> {
    let (c, h, w) = (sample.image.dim(0), sample.image.dim(1), sample.image.dim(2));
    let crop = config.crop;
    let (ch, cw) = (canvas(h, draw.scale), canvas(w, draw.scale));
    let (cy, cx) = ((ch as f64 - 1.0) / 2.0, (cw as f64 - 1.0) / 2.0);
    let (sin, cos) = draw.angle_deg.to_radians().sin_cos();
    // per-axis scale from the rounded canvas so native size maps exactly
    let (sy, sx) = (ch as f64 / h as f64, cw as f64 / w as f64);
    let pad = T::lit(config.image_pad);
    let mut image = vec![pad; c * crop * crop];
    let mut labels = vec![config.ignore_label; crop * crop];
    for oy in 0..crop {
        for ox in 0..crop {
            let py = (oy as i64 + draw.offset_y) as f64;
            let px = (ox as i64 + draw.offset_x) as f64;
            let (dy, dx) = (py - cy, px - cx);
            // inverse rotation about the canvas centre
            let ry = cy + cos * dy - sin * dx;
            let rx = cx + sin * dy + cos * dx;
            let y = (ry + 0.5) / sy - 0.5;
            let mut x = (rx + 0.5) / sx - 0.5;
            if draw.flip {
                x = (w - 1) as f64 - x;
            }
            let (ny, nx) = ((y + 0.5).floor(), (x + 0.5).floor());
            if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                continue;
            }
            let o = oy * crop + ox;
            labels[o] = sample.mask.get(ny as usize, nx as usize);
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (T::lit(y - y0 as f64), T::lit(x - x0 as f64));
            let one = T::one();
            for ch_i in 0..c {
                let plane = &sample.image.data()[ch_i * h * w..(ch_i + 1) * h * w];
                let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                image[ch_i * crop * crop + o] = top * (one - fy) + bottom * fy;
            }
        }
    }
    SegSample::new(Tensor::new(&[c, crop, crop], image)?, LabelMask::new(crop, crop, labels)?)
}

pub fn augment<T: Real>(sample: &SegSample<T>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<SegSample<T>> {
    let draw = AugmentDraw::sample(config, sample.mask.height, sample.mask.width, rng);
    augment_with(sample, &draw, config)
}
