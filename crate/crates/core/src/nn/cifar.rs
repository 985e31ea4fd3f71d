//! 14-layer residual networks for 32x32 images: plain, squeeze-excitation
//! gated, and context-encoding gated.

use rand_chacha::ChaCha8Rng;

use crate::encoding::{EncodingLayer, EncodingReadout};
use crate::error::{invalid, shape_err, Result};
use crate::nn::backbone::ConvBn;
use crate::nn::{Forward, Linear, ParamStore};
use crate::tape::Var;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Plain,
    Se,
    Encoding,
}

impl std::str::FromStr for CifarVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(CifarVariant::Plain),
            "se" => Ok(CifarVariant::Se),
            "encoding" => Ok(CifarVariant::Encoding),
            other => Err(invalid("cifar_variant", format!("unknown variant '{other}' (plain | se | encoding)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CifarConfig {
    pub variant: CifarVariant,
    /// Width of the first stage; doubled at each downsampling.
    pub width: usize,
    pub k: usize,
    pub se_reduction: usize,
    pub stochastic: bool,
    pub num_classes: usize,
}

pub const BLOCKS_PER_STAGE: usize = 2;
pub const STAGES: usize = 3;

impl CifarConfig {
    pub fn new(variant: CifarVariant, width: usize) -> Self {
        CifarConfig { variant, width, k: 16, se_reduction: 16, stochastic: true, num_classes: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_classes == 0 {
            return Err(invalid("cifar_config", "width and class count must be positive"));
        }
        if self.variant == CifarVariant::Encoding && (self.width % 4 != 0 || self.k == 0) {
            return Err(invalid("cifar_config", format!("encoding blocks need width % 4 == 0 and k >= 1 (width {}, k {})", self.width, self.k)));
        }
        if self.variant == CifarVariant::Se && self.se_reduction == 0 {
            return Err(invalid("cifar_config", "SE reduction must be positive"));
        }
        Ok(())
    }
}

/// Channel gate applied to the residual branch before the addition.
#[derive(Clone, Debug)]
pub enum Gate {
    None,
    Se { squeeze: Linear, excite: Linear },
    Encoding { reduce: ConvBn, encoding: EncodingLayer, fc: Linear },
}

impl Gate {
    /// Gate values `[N, C]` for a residual featuremap, if any.
    fn forward<T: Real>(&self, f: &mut Forward<'_, T>, r: Var) -> Result<Option<Var>> {
        let logits = match self {
            Gate::None => return Ok(None),
            Gate::Se { squeeze, excite } => {
                let pooled = f.tape.global_avg_pool(r)?;
                let h = squeeze.forward(f, pooled)?;
                let h = f.tape.relu(h)?;
                excite.forward(f, h)?
            }
            Gate::Encoding { reduce, encoding, fc } => {
                let z = reduce.forward_relu(f, r)?;
                let e = encoding.forward(f, z)?;
                fc.forward(f, e)?
            }
        };
        Ok(Some(f.tape.sigmoid(logits)?))
    }
}

#[derive(Clone, Debug)]
pub struct CifarBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub gate: Gate,
}

impl CifarBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &CifarConfig, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = ConvBn::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng);
        let conv2 = ConvBn::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng);
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 1, rng));
        let gate = match cfg.variant {
            CifarVariant::Plain => Gate::None,
            CifarVariant::Se => {
                let hidden = (cout / cfg.se_reduction).max(1);
                Gate::Se {
                    squeeze: Linear::new(store, &format!("{name}.se.squeeze"), cout, hidden, true, rng),
                    excite: Linear::new(store, &format!("{name}.se.excite"), hidden, cout, true, rng),
                }
            }
            CifarVariant::Encoding => {
                let reduced = cout / 4;
                let reduce = ConvBn::new(store, &format!("{name}.enc.reduce"), cout, reduced, 1, 1, 1, rng);
                let encoding = EncodingLayer::new(
                    store,
                    &format!("{name}.enc.encoding"),
                    reduced,
                    cfg.k,
                    EncodingReadout::ConcatNormalize,
                    cfg.stochastic,
                    rng,
                );
                let fc = Linear::new(store, &format!("{name}.enc.fc"), encoding.out_dim(), cout, true, rng);
                Gate::Encoding { reduce, encoding, fc }
            }
        };
        CifarBlock { conv1, conv2, shortcut, gate }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let r = self.conv1.forward_relu(f, x)?;
        let mut r = self.conv2.forward(f, r)?;
        if let Some(g) = self.gate.forward(f, r)? {
            r = f.tape.scale_channels(r, g)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(f, x)?,
            None => x,
        };
        let sum = f.tape.add(r, skip)?;
        f.tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct CifarNet {
    pub config: CifarConfig,
    pub stem: ConvBn,
    pub blocks: Vec<CifarBlock>,
    pub fc: Linear,
}

pub fn build_cifar_net<T: Real>(store: &mut ParamStore<T>, config: &CifarConfig, rng: &mut ChaCha8Rng) -> Result<CifarNet> {
    config.validate()?;
    let stem = ConvBn::new(store, "stem", 3, config.width, 3, 1, 1, rng);
    let mut blocks = Vec::new();
    let mut cin = config.width;
    for s in 0..STAGES {
        let cout = config.width << s;
        for b in 0..BLOCKS_PER_STAGE {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            blocks.push(CifarBlock::new(store, &format!("stage{}.block{b}", s + 1), config, cin, cout, stride, rng));
            cin = cout;
        }
    }
    let fc = Linear::new(store, "fc", cin, config.num_classes, true, rng);
    Ok(CifarNet { config: config.clone(), stem, blocks, fc })
}

impl CifarNet {
    /// Class logits `[N, num_classes]`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(shape_err("cifar_forward", format!("expected [N, 3, H, W], got {shape:?}")));
        }
        let mut y = self.stem.forward_relu(f, x)?;
        for b in &self.blocks {
            y = b.forward(f, y)?;
        }
        let pooled = f.tape.global_avg_pool(y)?;
        self.fc.forward(f, pooled)
    }

    /// Convolutions and fully connected layers on the main path; projection
    /// shortcuts and gate internals are not counted.
    pub fn weighted_layers(&self) -> usize {
        1 + 2 * self.blocks.len() + 1
    }
}
