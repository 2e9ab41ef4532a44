//! Image backbones mapping a `(B, 6, 128, 256)` frame pair to a
//! `(B, C, 4, 8)` feature map.
//!
//! `Full` follows EfficientNet-B2 (MBConv blocks with squeeze-excitation,
//! 1408 output channels) with a six-channel stem. `Tiny` is a four-layer
//! strided conv stack with the same output geometry.

use candle_core::{Module, ModuleT, Result, Tensor};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use opdd_core::calib::INPUT_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Full,
    Tiny,
}

/// Spatial size of every backbone's output map.
pub const FEATURE_MAP_HW: (usize, usize) = (4, 8);

const EFFNET_B2_HEAD: usize = 1408;
const TINY_OUT: usize = 64;

fn conv_cfg(stride: usize, padding: usize, groups: usize) -> Conv2dConfig {
    Conv2dConfig {
        stride,
        padding,
        groups,
        ..Default::default()
    }
}

fn bn(channels: usize, vb: VarBuilder) -> Result<BatchNorm> {
    batch_norm(
        channels,
        BatchNormConfig {
            eps: 1e-3,
            momentum: 0.01,
            ..Default::default()
        },
        vb,
    )
}

/// Convolution without bias, then batch norm and optional SiLU.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv2d_no_bias(c_in, c_out, k, conv_cfg(stride, k / 2, groups), vb.pp("conv"))?,
            bn: bn(c_out, vb.pp("bn"))?,
            act,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward_t(&self.conv.forward(x)?, train)?;
        if self.act {
            y.silu()
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let s = self.reduce.forward(&s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.expand.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(c_in: usize, c_out: usize, expand_ratio: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let c_mid = c_in * expand_ratio;
        let squeeze = (c_in / 4).max(1);
        let expand = if expand_ratio == 1 {
            None
        } else {
            Some(ConvBn::new(c_in, c_mid, 1, 1, 1, true, vb.pp("expand"))?)
        };
        Ok(Self {
            expand,
            depthwise: ConvBn::new(c_mid, c_mid, k, stride, c_mid, true, vb.pp("depthwise"))?,
            se: SqueezeExcite {
                reduce: conv2d(c_mid, squeeze, 1, Default::default(), vb.pp("se.reduce"))?,
                expand: conv2d(squeeze, c_mid, 1, Default::default(), vb.pp("se.expand"))?,
            },
            project: ConvBn::new(c_mid, c_out, 1, 1, 1, false, vb.pp("project"))?,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = match &self.expand {
            Some(e) => e.forward_t(x, train)?,
            None => x.clone(),
        };
        y = self.depthwise.forward_t(&y, train)?;
        y = self.se.forward(&y)?;
        y = self.project.forward_t(&y, train)?;
        if self.residual {
            y + x
        } else {
            Ok(y)
        }
    }
}

/// `(expand ratio, kernel, stride, output channels, repeats)` per stage,
/// already scaled by the B2 width (1.1) and depth (1.2) multipliers.
const B2_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 16, 2),
    (6, 3, 2, 24, 3),
    (6, 5, 2, 48, 3),
    (6, 3, 2, 88, 4),
    (6, 5, 1, 120, 4),
    (6, 5, 2, 208, 5),
    (6, 3, 1, 352, 2),
];
const B2_STEM: usize = 32;

#[derive(Debug, Clone)]
pub struct EfficientNetB2 {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    head: ConvBn,
}

impl EfficientNetB2 {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let stem = ConvBn::new(INPUT_CHANNELS, B2_STEM, 3, 2, 1, true, vb.pp("stem"))?;
        let mut blocks = Vec::new();
        let mut c_in = B2_STEM;
        for (s, &(e, k, stride, c_out, repeats)) in B2_STAGES.iter().enumerate() {
            for r in 0..repeats {
                let (block_in, block_stride) = if r == 0 { (c_in, stride) } else { (c_out, 1) };
                blocks.push(MbConv::new(
                    block_in,
                    c_out,
                    e,
                    k,
                    block_stride,
                    vb.pp(format!("blocks.{s}.{r}")),
                )?);
            }
            c_in = c_out;
        }
        let head = ConvBn::new(c_in, EFFNET_B2_HEAD, 1, 1, 1, true, vb.pp("head"))?;
        Ok(Self { stem, blocks, head })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem.forward_t(x, train)?;
        for b in &self.blocks {
            y = b.forward_t(&y, train)?;
        }
        self.head.forward_t(&y, train)
    }
}

#[derive(Debug, Clone)]
pub struct TinyBackbone {
    convs: Vec<Conv2d>,
}

impl TinyBackbone {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let convs = vec![
            conv2d(INPUT_CHANNELS, 16, 4, conv_cfg(4, 0, 1), vb.pp("conv0"))?,
            conv2d(16, 32, 3, conv_cfg(2, 1, 1), vb.pp("conv1"))?,
            conv2d(32, 64, 3, conv_cfg(2, 1, 1), vb.pp("conv2"))?,
            conv2d(64, TINY_OUT, 3, conv_cfg(2, 1, 1), vb.pp("conv3"))?,
        ];
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for c in &self.convs {
            y = c.forward(&y)?.relu()?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Full(EfficientNetB2),
    Tiny(TinyBackbone),
}

impl Backbone {
    pub fn new(variant: BackboneVariant, vb: VarBuilder) -> Result<Self> {
        Ok(match variant {
            BackboneVariant::Full => Self::Full(EfficientNetB2::new(vb)?),
            BackboneVariant::Tiny => Self::Tiny(TinyBackbone::new(vb)?),
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Full(_) => EFFNET_B2_HEAD,
            Self::Tiny(_) => TINY_OUT,
        }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Self::Full(net) => net.forward_t(x, train),
            Self::Tiny(net) => net.forward(x),
        }
    }
}
