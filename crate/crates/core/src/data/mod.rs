//! Samples, label masks, and dataset readers/generators.

pub mod cifar;
pub mod synth;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

/// Label used for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: i32 = 255;

/// Integer label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid("mask", format!("{height}x{width} mask given {} labels", labels.len())));
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: i32) -> Self {
        LabelMask { height, width, labels: vec![label; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.labels[row * self.width + col]
    }

    /// Checks every label is a class index or the ignore label.
    pub fn validate(&self, num_classes: usize, ignore_label: i32) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if l != ignore_label && (l < 0 || l as usize >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: l as i64,
                    row: i / self.width,
                    col: i % self.width,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Image `[C, H, W]` with its dense label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<T> {
    pub image: Tensor<T>,
    pub mask: LabelMask,
}

impl<T: Real> SegSample<T> {
    pub fn new(image: Tensor<T>, mask: LabelMask) -> Result<Self> {
        if image.ndim() != 3 || image.dim(1) != mask.height || image.dim(2) != mask.width {
            return Err(invalid("sample", format!("image {:?} vs mask {}x{}", image.shape(), mask.height, mask.width)));
        }
        Ok(SegSample { image, mask })
    }
}

/// Stacks `[C, H, W]` images into `[N, C, H, W]`.
pub fn stack_images<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("stack", "no images"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(invalid("stack", format!("{:?} vs {:?}", img.shape(), first.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}
