//! Segmentation networks: the dilated FCN baseline and EncNet, which adds a
//! context encoding module before the classifier and an auxiliary
//! presence-only module on stage 3.

use rand_chacha::ChaCha8Rng;

use crate::context::ContextModule;
use crate::error::{invalid, shape_err, Result};
use crate::nn::backbone::{Backbone, BackboneConfig, ConvBn};
use crate::nn::{Conv2d, Forward, Mode, ParamStore};
use crate::ops::{bilinear_resize, flip_horizontal, softmax, Conv2dParams};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CODEWORDS: usize = 32;
pub const DEFAULT_SE_WEIGHT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Fcn,
    EncNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Codewords per encoding layer; 0 means global average pooling.
    pub k: usize,
    /// Weight of each presence loss term.
    pub se_weight: f64,
    /// Adds the auxiliary presence-only module on stage 3.
    pub stage3_branch: bool,
    /// Optional 3x3 conv + BN + ReLU reducing stage-4 width before the head.
    /// Shared by both head kinds so comparisons stay fair.
    pub head_width: Option<usize>,
}

impl SegConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        SegConfig { backbone, num_classes, k: DEFAULT_CODEWORDS, se_weight: DEFAULT_SE_WEIGHT, stage3_branch: true, head_width: None }
    }

    /// ResNet-50 backbone with a 512-wide head.
    pub fn resnet50(num_classes: usize) -> Self {
        SegConfig { head_width: Some(512), ..Self::new(BackboneConfig::resnet50(), num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("seg_config", format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(self.se_weight >= 0.0) {
            return Err(invalid("seg_config", format!("presence loss weight must be >= 0, got {}", self.se_weight)));
        }
        Ok(())
    }

    fn head_in(&self) -> usize {
        self.head_width.unwrap_or(self.backbone.stage_out(3))
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub kind: HeadKind,
    pub config: SegConfig,
    pub backbone: Backbone,
    pub reduce: Option<ConvBn>,
    pub context: Option<ContextModule>,
    pub aux: Option<ContextModule>,
    pub classifier: Conv2d,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct SegOutput {
    /// Full-resolution class scores `[N, Cls, H, W]`.
    pub logits: Var,
    /// Presence probabilities from the main module.
    pub se_main: Option<Var>,
    /// Presence probabilities from the stage-3 module.
    pub se_aux: Option<Var>,
    pub stages: Vec<Var>,
    /// Featuremap entering the classifier.
    pub head: Var,
}

impl SegOutput {
    pub fn se_probs(&self) -> Vec<Var> {
        self.se_main.into_iter().chain(self.se_aux).collect()
    }
}

pub fn build_fcn<T: Real>(store: &mut ParamStore<T>, config: &SegConfig, rng: &mut ChaCha8Rng) -> Result<SegNet> {
    SegNet::new(store, HeadKind::Fcn, config, rng)
}

pub fn build_encnet<T: Real>(store: &mut ParamStore<T>, config: &SegConfig, rng: &mut ChaCha8Rng) -> Result<SegNet> {
    SegNet::new(store, HeadKind::EncNet, config, rng)
}

impl SegNet {
    /// Backbone parameters are drawn first, so two nets built from the same
    /// seed share backbone weights regardless of head kind.
    pub fn new<T: Real>(store: &mut ParamStore<T>, kind: HeadKind, config: &SegConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, "backbone", &config.backbone, rng);
        let stage4 = config.backbone.stage_out(3);
        let reduce = config.head_width.map(|w| ConvBn::new(store, "head.reduce", stage4, w, 3, 1, 1, rng));
        let width = config.head_in();
        let classifier =
            Conv2d::new(store, "head.classifier", width, config.num_classes, 1, Conv2dParams::default(), true, rng);
        let (context, aux) = match kind {
            HeadKind::Fcn => (None, None),
            HeadKind::EncNet => {
                let main = ContextModule::new(store, "head.context", width, config.k, config.num_classes, true, rng);
                let aux = config.stage3_branch.then(|| {
                    let c3 = config.backbone.stage_out(2);
                    ContextModule::new(store, "head.aux", c3, config.k, config.num_classes, false, rng)
                });
                (Some(main), aux)
            }
        };
        Ok(SegNet { kind, config: config.clone(), backbone, reduce, context, aux, classifier })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<SegOutput> {
        let shape = f.tape.shape(x).to_vec();
        let os = self.config.backbone.output_stride();
        if shape.len() != 4 || shape[1] != self.config.backbone.in_channels {
            return Err(shape_err(
                "seg_forward",
                format!("expected [N, {}, H, W], got {shape:?}", self.config.backbone.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % os != 0 || w % os != 0 || h == 0 || w == 0 {
            return Err(shape_err("seg_forward", format!("H: {h}, W: {w} must be positive multiples of {os}")));
        }
        let stages = self.backbone.forward(f, x)?;
        let mut head = stages[3];
        if let Some(r) = &self.reduce {
            head = r.forward_relu(f, head)?;
        }
        let mut se_main = None;
        if let Some(ctx) = &self.context {
            let out = ctx.forward(f, head)?;
            head = out.y.expect("main module gates its input");
            se_main = Some(out.se_probs);
        }
        let se_aux = match &self.aux {
            Some(aux) => Some(aux.forward(f, stages[2])?.se_probs),
            None => None,
        };
        let coarse = self.classifier.forward(f, head)?;
        let logits = f.tape.bilinear_resize(coarse, h, w)?;
        Ok(SegOutput { logits, se_main, se_aux, stages, head })
    }

    /// Class probabilities `[N, Cls, H, W]` in evaluation mode.
    pub fn predict<T: Real>(&self, store: &mut ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = Forward::new(store, Mode::Eval).without_grads();
        let x = f.input(images.clone());
        let out = self.forward(&mut f, x)?;
        softmax(f.value(out.logits), 1)
    }

    pub fn stage_dilations(&self) -> Vec<Vec<usize>> {
        self.backbone.stage_dilations()
    }
}

/// Nearest positive multiple of `step` to `size * scale`.
pub fn scaled_size(size: usize, scale: f64, step: usize) -> usize {
    let raw = size as f64 * scale / step as f64;
    (raw.round() as usize).max(1) * step
}

/// Class probabilities averaged over rescaled copies of `images` (and their
/// mirror images when `flip` is set), each mapped back to the input size.
pub fn multi_scale_eval<T: Real>(
    net: &SegNet,
    store: &mut ParamStore<T>,
    images: &Tensor<T>,
    scales: &[f64],
    flip: bool,
) -> Result<Tensor<T>> {
    if scales.is_empty() {
        return Err(invalid("multi_scale_eval", "scales must be nonempty"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(invalid("multi_scale_eval", format!("scale {s} must be positive")));
    }
    if images.ndim() != 4 {
        return Err(shape_err("multi_scale_eval", format!("expected [N,C,H,W], got {:?}", images.shape())));
    }
    let (h, w) = (images.dim(2), images.dim(3));
    let os = net.config.backbone.output_stride();
    let mut total: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for &s in scales {
        let (sh, sw) = (scaled_size(h, s, os), scaled_size(w, s, os));
        let scaled = bilinear_resize(images, sh, sw)?;
        let mut views = vec![(scaled.clone(), false)];
        if flip {
            views.push((flip_horizontal(&scaled), true));
        }
        for (view, flipped) in views {
            let mut probs = net.predict(store, &view)?;
            if flipped {
                probs = flip_horizontal(&probs);
            }
            let back = bilinear_resize(&probs, h, w)?;
            match &mut total {
                Some(t) => t.add_assign(&back)?,
                None => total = Some(back),
            }
            count += 1;
        }
    }
    let total = total.expect("at least one view");
    Ok(total.scale(T::one() / T::lit(count as f64)))
}
