//! Network descriptions.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s plus the latent
//! (or input) geometry. Parameters live separately in a
//! [`WeightStore`](crate::weights::WeightStore).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Where a convolution's spatial context comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPadding {
    /// Padded externally by `(k - 1) / 2`: halo exchange between patches,
    /// replicate padding at open borders.
    #[default]
    External,
    /// Conventional zero padding by `(k - 1) / 2`, as in most pretrained
    /// networks. [`strip_zero_padding`](crate::tiled::strip_zero_padding)
    /// turns these into [`ConvPadding::External`].
    Zero,
    /// No padding at all; the output shrinks by `k - 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: ConvPadding,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Act {
        act: Activation,
    },
    Upsample2x,
    PixelShuffle {
        factor: usize,
    },
    /// Pre-activation residual block: two 3x3 convolutions, each preceded by
    /// batch norm and `act`, plus a 1x1 skip when the channel count changes.
    ResBlock {
        in_channels: usize,
        out_channels: usize,
        act: Activation,
        eps: f32,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel: 3, stride: 1, padding: ConvPadding::External }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel: 1, stride: 1, padding: ConvPadding::External }
    }
}

/// Input geometry plus the ordered layers.
///
/// For generators the input is a latent of `z_channels x z_spatial x
/// z_spatial` per patch; for image-to-image networks `z_channels` is the
/// image channel count and `z_spatial` is unused by tiling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub z_channels: usize,
    pub z_spatial: usize,
    pub out_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// One convolution that consumes a halo, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialConv {
    pub in_channels: usize,
    pub kernel: usize,
    pub halo: usize,
    pub padding: ConvPadding,
    /// Spatial scale of this convolution's input relative to the network
    /// input (product of upsampling factors so far).
    pub scale: usize,
}

impl NetworkSpec {
    /// Checks that channel counts chain and kernels are odd.
    pub fn validate(&self) -> Result<()> {
        if self.z_channels == 0 || self.z_spatial == 0 || self.out_channels == 0 {
            return Err(Error::spec("channel counts and z_spatial must be positive"));
        }
        let mut ch = self.z_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Err(Error::spec(format!("layer {i}: {msg}")));
            match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, .. } => {
                    if in_channels != ch {
                        return bad(format!("conv expects {in_channels} channels, gets {ch}"));
                    }
                    if kernel == 0 || kernel % 2 == 0 {
                        return bad(format!("kernel size {kernel} must be odd"));
                    }
                    if stride == 0 || out_channels == 0 {
                        return bad("stride and out_channels must be positive".into());
                    }
                    ch = out_channels;
                }
                LayerSpec::BatchNorm { channels, eps } => {
                    if channels != ch {
                        return bad(format!("batch norm over {channels} channels, gets {ch}"));
                    }
                    if !(eps >= 0.0) {
                        return bad(format!("eps {eps} must be non-negative"));
                    }
                }
                LayerSpec::Act { .. } | LayerSpec::Upsample2x => {}
                LayerSpec::PixelShuffle { factor } => {
                    if factor == 0 || ch % (factor * factor) != 0 {
                        return bad(format!("{ch} channels not divisible by {factor}^2"));
                    }
                    ch /= factor * factor;
                }
                LayerSpec::ResBlock { in_channels, out_channels, eps, .. } => {
                    if in_channels != ch {
                        return bad(format!("residual block expects {in_channels} channels, gets {ch}"));
                    }
                    if out_channels == 0 || !(eps >= 0.0) {
                        return bad("invalid residual block parameters".into());
                    }
                    ch = out_channels;
                }
            }
        }
        if ch != self.out_channels {
            return Err(Error::spec(format!("network ends with {ch} channels, declares {}", self.out_channels)));
        }
        Ok(())
    }

    /// Product of all upsampling factors.
    pub fn upscale(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Upsample2x => 2,
                LayerSpec::PixelShuffle { factor } => factor,
                _ => 1,
            })
            .product()
    }

    pub fn num_upsample2x(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Upsample2x)).count()
    }

    /// Output extent of one generated patch: `z_spatial * 2^(upsample2x
    /// layers)` (times any pixel-shuffle factors).
    pub fn patch_extent(&self) -> usize {
        self.z_spatial * self.upscale()
    }

    /// Every convolution with a non-zero halo, in execution order (residual
    /// blocks contribute two).
    pub fn spatial_convs(&self) -> Vec<SpatialConv> {
        let mut out = Vec::new();
        let mut scale = 1;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { in_channels, kernel, padding, .. } if kernel > 1 => {
                    out.push(SpatialConv { in_channels, kernel, halo: (kernel - 1) / 2, padding, scale });
                }
                LayerSpec::ResBlock { in_channels, out_channels, .. } => {
                    let c = SpatialConv { in_channels, kernel: 3, halo: 1, padding: ConvPadding::External, scale };
                    out.push(c);
                    out.push(SpatialConv { in_channels: out_channels, ..c });
                }
                LayerSpec::Upsample2x => scale *= 2,
                LayerSpec::PixelShuffle { factor } => scale *= factor,
                _ => {}
            }
        }
        out
    }

    /// Receptive radius in output pixels: how far, in the output, the effect
    /// of a border condition can reach inward.
    pub fn receptive_radius(&self) -> usize {
        let up = self.upscale();
        self.spatial_convs().iter().map(|c| c.halo * up / c.scale).sum()
    }

    pub fn has_stride(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { stride, .. } if *stride > 1))
    }

    pub fn max_channels(&self) -> usize {
        let mut m = self.z_channels.max(self.out_channels);
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { in_channels, out_channels, .. }
                | LayerSpec::ResBlock { in_channels, out_channels, .. } => {
                    m = m.max(in_channels).max(out_channels)
                }
                LayerSpec::BatchNorm { channels, .. } => m = m.max(channels),
                _ => {}
            }
        }
        m
    }
}

pub const DEFAULT_Z_CHANNELS: usize = 64;
pub const CHANNEL_FLOOR: usize = 32;
pub const BN_EPS: f32 = 1e-5;

/// The texture generator: an initial 3x3 conv, then `num_blocks` x
/// (nearest 2x upsample, residual block), then BN, ReLU, a 3x3 conv to RGB
/// and tanh.
///
/// Channel widths start at `base_channels` and halve after every block,
/// never dropping below `min(32, base_channels)`.
pub fn build_texture_generator(
    num_blocks: usize,
    base_channels: usize,
    z_spatial: usize,
    z_channels: usize,
) -> Result<NetworkSpec> {
    if num_blocks == 0 || base_channels == 0 || z_spatial == 0 || z_channels == 0 {
        return Err(Error::spec("generator needs at least one block and positive sizes"));
    }
    let floor = CHANNEL_FLOOR.min(base_channels);
    let act = Activation::Relu;
    let mut layers = vec![LayerSpec::conv3x3(z_channels, base_channels)];
    let mut ch = base_channels;
    for _ in 0..num_blocks {
        let next = (ch / 2).max(floor);
        layers.push(LayerSpec::Upsample2x);
        layers.push(LayerSpec::ResBlock { in_channels: ch, out_channels: next, act, eps: BN_EPS });
        ch = next;
    }
    layers.push(LayerSpec::BatchNorm { channels: ch, eps: BN_EPS });
    layers.push(LayerSpec::Act { act });
    layers.push(LayerSpec::conv3x3(ch, 3));
    layers.push(LayerSpec::Act { act: Activation::Tanh });
    let spec = NetworkSpec { z_channels, z_spatial, out_channels: 3, layers };
    spec.validate()?;
    Ok(spec)
}
