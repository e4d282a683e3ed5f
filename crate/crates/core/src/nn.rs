//! Forward-pass kernels: valid convolution, inference batch norm, nearest
//! upsampling, pixel shuffle, activations and the pre-activation residual
//! block.
//!
//! None of the kernels pad. Spatial context is always supplied by the caller
//! (halo exchange, replicate or zero padding), which is what lets the same
//! kernels run on a whole image or on a grid of patches with identical
//! arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Convolution weights `(out_ch, in_ch, k, k)` plus one bias per output
/// channel. `k` is odd so the halo `(k - 1) / 2` is integral.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return Err(Error::shape(format!("kernel must be square, got {}x{}", s.h, s.w)));
        }
        if s.h % 2 == 0 {
            return Err(Error::Unsupported(format!("even kernel size {}", s.h)));
        }
        if bias.len() != s.n {
            return Err(Error::shape(format!("{} biases for {} output channels", bias.len(), s.n)));
        }
        Ok(ConvKernel { weights, bias })
    }

    /// A `channels -> channels` kernel that copies its input (delta at the
    /// centre tap).
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut w = Tensor::zeros(Shape::new(channels, channels, k, k));
        for c in 0..channels {
            w.set(c, c, k / 2, k / 2, 1.0);
        }
        ConvKernel::new(w, vec![0.0; channels])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn size(&self) -> usize {
        self.weights.shape().h
    }

    pub fn halo(&self) -> usize {
        (self.size() - 1) / 2
    }
}

/// Valid (unpadded) cross-correlation.
///
/// Each output value is accumulated as
/// `bias + sum over (in_ch, ky, kx) of w * x`, starting from the bias and
/// adding taps in ascending `in_ch`, then `ky`, then `kx` order. The order is
/// fixed so a patch and the full image produce bit-identical values for the
/// same window.
pub fn conv2d_valid(x: &Tensor, k: &ConvKernel, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = k.weights.shape();
    if stride == 0 {
        return Err(Error::Unsupported("stride 0".into()));
    }
    if xs.c != ks.c {
        return Err(Error::shape(format!("input has {} channels, kernel expects {}", xs.c, ks.c)));
    }
    if xs.h < ks.h || xs.w < ks.w {
        return Err(Error::shape(format!(
            "input {}x{} smaller than kernel {}x{}",
            xs.h, xs.w, ks.h, ks.w
        )));
    }
    let oh = (xs.h - ks.h) / stride + 1;
    let ow = (xs.w - ks.w) / stride + 1;
    let out_shape = Shape::new(xs.n, ks.n, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let ksz = ks.h;
    let plane = oh * ow;

    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let n = idx / ks.n;
        let oc = idx % ks.n;
        let bias = k.bias[oc];
        let wk = &k.weights.data()[oc * ks.c * ksz * ksz..(oc + 1) * ks.c * ksz * ksz];
        for oy in 0..oh {
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            row.fill(bias);
            for ic in 0..xs.c {
                let src = x.plane(n, ic);
                for ky in 0..ksz {
                    let iy = oy * stride + ky;
                    let in_row = &src[iy * xs.w..(iy + 1) * xs.w];
                    for kx in 0..ksz {
                        let w = wk[(ic * ksz + ky) * ksz + kx];
                        if stride == 1 {
                            let seg = &in_row[kx..kx + ow];
                            for (o, &v) in row.iter_mut().zip(seg) {
                                *o += w * v;
                            }
                        } else {
                            for (ox, o) in row.iter_mut().enumerate() {
                                *o += w * in_row[ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Inference-mode batch normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batch norm parameter lengths differ"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::spec(format!("batch norm eps {} must be non-negative", self.eps)));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::spec("batch norm running_var must be non-negative"));
        }
        Ok(())
    }
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn bn_inference(x: &Tensor, p: &BnParams) -> Result<Tensor> {
    let s = x.shape();
    if p.channels() != s.c {
        return Err(Error::shape(format!("batch norm has {} channels, input {}", p.channels(), s.c)));
    }
    p.validate()?;
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b, m) = (p.gamma[c], p.beta[c], p.running_mean[c]);
            let denom = (p.running_var[c] + p.eps).sqrt();
            for v in out.plane_mut(n, c) {
                *v = g * (*v - m) / denom + b;
            }
        }
    }
    Ok(out)
}

/// Replicates every pixel into a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let srow = &src[y * s.w..(y + 1) * s.w];
                let d0 = 2 * y * out_shape.w;
                for (x, &v) in srow.iter().enumerate() {
                    dst[d0 + 2 * x] = v;
                    dst[d0 + 2 * x + 1] = v;
                }
                dst.copy_within(d0..d0 + out_shape.w, d0 + out_shape.w);
            }
        }
    }
    out
}

/// Depth-to-space rearrangement: `(c * r^2, h, w) -> (c, h * r, w * r)`,
/// with input channel `c * r^2 + i * r + j` landing at offset `(i, j)` of
/// each `r x r` output block.
pub fn pixel_shuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    let r2 = factor * factor;
    if factor == 0 || s.c % r2 != 0 {
        return Err(Error::shape(format!("{} channels not divisible by {factor}^2", s.c)));
    }
    let oc = s.c / r2;
    let out_shape = Shape::new(s.n, oc, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..oc {
            for i in 0..factor {
                for j in 0..factor {
                    let src = x.plane(n, c * r2 + i * factor + j).to_vec();
                    let dst = out.plane_mut(n, c);
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            dst[(y * factor + i) * out_shape.w + xx * factor + j] = src[y * s.w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f32 },
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Pre-activation residual block:
/// `out = skip(x) + conv2(pad(act(bn2(conv1(pad(act(bn1(x))))))))`.
///
/// Both convolutions are valid; the padding in between is what keeps the
/// output the same size as `x`. `skip` is a 1x1 convolution when the channel
/// count changes and the identity otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub bn1: BnParams,
    pub conv1: ConvKernel,
    pub bn2: BnParams,
    pub conv2: ConvKernel,
    pub skip: Option<ConvKernel>,
    pub act: Activation,
}

impl ResBlock {
    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let (cin, cout) = (self.in_channels(), self.out_channels());
        if self.bn1.channels() != cin
            || self.conv1.out_channels() != self.bn2.channels()
            || self.conv2.in_channels() != self.conv1.out_channels()
        {
            return Err(Error::shape("residual block channel chain is inconsistent"));
        }
        match &self.skip {
            None if cin != cout => Err(Error::shape(format!(
                "residual block maps {cin} -> {cout} channels but has no skip kernel"
            ))),
            Some(k) if k.size() != 1 || k.in_channels() != cin || k.out_channels() != cout => {
                Err(Error::shape("skip kernel must be 1x1 from input to output channels"))
            }
            _ => Ok(()),
        }
    }
}

/// Runs a residual block on a single tensor. `pad(t, halo)` supplies the
/// padded input for each 3x3 convolution.
pub fn residual_block(
    x: &Tensor,
    block: &ResBlock,
    mut pad: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    block.validate()?;
    let h = activation(&bn_inference(x, &block.bn1)?, block.act);
    let h = conv2d_valid(&pad(&h, block.conv1.halo())?, &block.conv1, 1)?;
    let h = activation(&bn_inference(&h, &block.bn2)?, block.act);
    let h = conv2d_valid(&pad(&h, block.conv2.halo())?, &block.conv2, 1)?;
    let skip = match &block.skip {
        Some(k) => conv2d_valid(x, k, 1)?,
        None => x.clone(),
    };
    skip.add(&h)
}
