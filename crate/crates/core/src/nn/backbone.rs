//! Dilated residual backbone with output stride 8.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{BatchNorm, Conv2d, Forward, ParamStore};
use crate::ops::Conv2dParams;
use crate::tape::Var;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand by 4.
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Four residual stages after a stem that downsamples by 4. Stage 2 halves
/// the resolution once more; stages 3 and 4 keep it and dilate instead.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub dilations: [usize; 4],
    pub block: BlockKind,
}

pub const STAGE_STRIDES: [usize; 4] = [1, 2, 1, 1];
pub const STEM_STRIDE: usize = 4;

impl BackboneConfig {
    /// Reduced backbone, widths 32-64-128-256, two basic blocks per stage.
    pub fn desk() -> Self {
        Self::basic([32, 64, 128, 256], 16)
    }

    pub fn basic(widths: [usize; 4], stem_width: usize) -> Self {
        BackboneConfig { in_channels: 3, stem_width, widths, blocks: [2; 4], dilations: [1, 1, 2, 4], block: BlockKind::Basic }
    }

    /// ResNet-50 layout: bottleneck blocks 3-4-6-3, output widths 256..2048.
    pub fn resnet50() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_width: 64,
            widths: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            dilations: [1, 1, 2, 4],
            block: BlockKind::Bottleneck,
        }
    }

    pub fn stage_out(&self, stage: usize) -> usize {
        self.widths[stage] * self.block.expansion()
    }

    pub fn output_stride(&self) -> usize {
        STEM_STRIDE * STAGE_STRIDES.iter().product::<usize>()
    }
}

fn conv(
    store: &mut ParamStore<impl Real>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    rng: &mut ChaCha8Rng,
) -> Conv2d {
    let pad = dilation * (k - 1) / 2;
    Conv2d::new(store, name, cin, cout, k, Conv2dParams::new(stride, pad, dilation), false, rng)
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = conv(store, &format!("{name}.conv"), cin, cout, k, stride, dilation, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        ConvBn { conv, bn }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        f.batchnorm(y, &self.bn)
    }

    pub fn forward_relu<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(f, x)?;
        f.tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    /// Main path; ReLU follows every layer except the last.
    pub layers: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: BlockKind,
        cin: usize,
        width: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cout = width * kind.expansion();
        let layers = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(store, &format!("{name}.conv1"), cin, width, 3, stride, dilation, rng),
                ConvBn::new(store, &format!("{name}.conv2"), width, width, 3, 1, dilation, rng),
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(store, &format!("{name}.conv1"), cin, width, 1, 1, 1, rng),
                ConvBn::new(store, &format!("{name}.conv2"), width, width, 3, stride, dilation, rng),
                ConvBn::new(store, &format!("{name}.conv3"), width, cout, 1, 1, 1, rng),
            ],
        };
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 1, rng));
        ResBlock { layers, shortcut }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            y = if i < last { layer.forward_relu(f, y)? } else { layer.forward(f, y)? };
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(f, x)?,
            None => x,
        };
        let sum = f.tape.add(y, skip)?;
        f.tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Vec<ConvBn>,
    pub stages: Vec<Vec<ResBlock>>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = vec![
            ConvBn::new(store, &format!("{name}.stem1"), config.in_channels, config.stem_width, 3, 2, 1, rng),
            ConvBn::new(store, &format!("{name}.stem2"), config.stem_width, config.stem_width, 3, 2, 1, rng),
        ];
        let mut cin = config.stem_width;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                let block_name = format!("{name}.stage{}.block{b}", s + 1);
                blocks.push(ResBlock::new(store, &block_name, config.block, cin, config.widths[s], stride, config.dilations[s], rng));
                cin = config.stage_out(s);
            }
            stages.push(blocks);
        }
        Backbone { config: config.clone(), stem, stages }
    }

    /// Outputs of the four stages.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut y = x;
        for layer in &self.stem {
            y = layer.forward_relu(f, y)?;
        }
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(f, y)?;
            }
            outs.push(y);
        }
        Ok(outs)
    }

    /// Dilation of every 3x3 main-path convolution, per stage.
    pub fn stage_dilations(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|blocks| {
                blocks
                    .iter()
                    .flat_map(|b| b.layers.iter().filter(|l| l.conv.kernel == 3).map(|l| l.conv.params.dilation))
                    .collect()
            })
            .collect()
    }
}
