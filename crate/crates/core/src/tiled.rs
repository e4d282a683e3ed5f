//! Tiled inference for image-to-image convolutional networks.
//!
//! Zero-padded convolutions are rewritten to take their context from
//! neighbouring tiles ([`strip_zero_padding`]), after which
//! [`tile_apply`] in [`TileMode::LocalPadding`] reproduces a single pass
//! over the whole image with replicate padding at the true image borders.
//! [`TileMode::OverlapBaseline`] is the conventional alternative: tiles
//! with some overlap run independently and are blended with linear
//! feathering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{single_pass, BlockOptions, GridExecutor, PaddingMode};
use crate::error::{Error, Result};
use crate::halo::FeatureGrid;
use crate::netspec::{ConvPadding, LayerSpec, NetworkSpec};
use crate::network::Network;
use crate::nn::Activation;
use crate::tensor::{view, Shape, Slice2D, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TileMode {
    LocalPadding,
    OverlapBaseline { overlap: usize },
    SinglePass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Tile extent in input pixels. A remainder too small to hold a halo is
    /// merged into the last tile of its row or column.
    pub tile: usize,
    pub mode: TileMode,
}

/// Marks every zero-padded convolution as halo-fed. Fails, naming the
/// offending layers, when a strided convolution is present.
pub fn strip_zero_padding(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let strided: Vec<String> = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            LayerSpec::Conv { stride, .. } if *stride > 1 => Some(format!("layer {i} (stride {stride})")),
            _ => None,
        })
        .collect();
    if !strided.is_empty() {
        return Err(Error::Unsupported(format!("strided convolutions cannot be halo-fed: {}", strided.join(", "))));
    }
    let mut out = spec.clone();
    for l in &mut out.layers {
        if let LayerSpec::Conv { padding, .. } = l {
            if *padding == ConvPadding::Zero {
                *padding = ConvPadding::External;
            }
        }
    }
    Ok(out)
}

/// Smallest tile extent (input pixels) for which every convolution's halo
/// fits inside one neighbouring tile.
pub fn min_tile(spec: &NetworkSpec) -> usize {
    spec.spatial_convs().iter().map(|c| c.halo.div_ceil(c.scale)).max().unwrap_or(1).max(1)
}

/// Splits `len` into tile extents.
pub fn split_extent(len: usize, tile: usize, min: usize) -> Result<Vec<usize>> {
    if tile == 0 {
        return Err(Error::spec("tile extent must be positive"));
    }
    if tile < min {
        return Err(Error::Halo(format!("tile {tile} is smaller than the halo demand {min}")));
    }
    if len < min {
        return Err(Error::Halo(format!("image extent {len} is smaller than the halo demand {min}")));
    }
    let mut parts = vec![tile; len / tile];
    let rem = len % tile;
    if rem > 0 {
        match parts.last_mut() {
            Some(last) if rem < min => *last += rem,
            _ => parts.push(rem),
        }
    }
    Ok(parts)
}

fn offsets(parts: &[usize]) -> Vec<usize> {
    parts.iter().scan(0, |acc, &p| {
        let o = *acc;
        *acc += p;
        Some(o)
    }).collect()
}

/// Runs `net` over `image` as planned. All modes use the network with
/// zero padding stripped, so they agree wherever tiling is exact.
pub fn tile_apply(image: &Tensor, net: &Network, plan: TilePlan) -> Result<Tensor> {
    let spec = strip_zero_padding(net.spec())?;
    let stripped = if &spec == net.spec() { net.clone() } else { net.with_spec(spec)? };
    let s = image.shape();
    if s.c != stripped.spec().z_channels {
        return Err(Error::shape(format!("input has {} channels, network expects {}", s.c, stripped.spec().z_channels)));
    }
    match plan.mode {
        TileMode::SinglePass => single_pass(&stripped, image),
        TileMode::LocalPadding => local_tiles(image, &stripped, plan.tile),
        TileMode::OverlapBaseline { overlap } => overlap_tiles(image, &stripped, plan.tile, overlap),
    }
}

fn local_tiles(image: &Tensor, net: &Network, tile: usize) -> Result<Tensor> {
    let s = image.shape();
    let min = min_tile(net.spec());
    let hs = split_extent(s.h, tile, min)?;
    let ws = split_extent(s.w, tile, min)?;
    let (ys, xs) = (offsets(&hs), offsets(&ws));
    let mut patches = Vec::with_capacity(hs.len() * ws.len());
    for (r, &h) in hs.iter().enumerate() {
        for (c, &w) in ws.iter().enumerate() {
            patches.push(view(image, Slice2D::new(ys[r], xs[c], h, w))?);
        }
    }
    let grid = FeatureGrid::new(hs.len(), ws.len(), patches)?;
    let opts = BlockOptions::default();
    let mut exec = GridExecutor::new(PaddingMode::Local, &opts);
    net.forward(&mut exec, grid)?.assemble()
}

fn ramp(u: f64, start: usize, end: usize, len: usize, overlap: usize) -> f64 {
    let width = (2 * overlap) as f64;
    let left = if start == 0 { f64::INFINITY } else { u - start as f64 };
    let right = if end == len { f64::INFINITY } else { end as f64 - u };
    (left.min(right) / width).clamp(0.0, 1.0)
}

fn overlap_tiles(image: &Tensor, net: &Network, tile: usize, overlap: usize) -> Result<Tensor> {
    let spec = net.spec();
    if spec.layers.iter().any(|l| matches!(l, LayerSpec::Conv { padding: ConvPadding::Valid, .. })) {
        return Err(Error::Unsupported("valid convolutions change tile extents in overlap mode".into()));
    }
    let s = image.shape();
    let min = min_tile(spec);
    let hs = split_extent(s.h, tile, min.min(tile))?;
    let ws = split_extent(s.w, tile, min.min(tile))?;
    let (ys, xs) = (offsets(&hs), offsets(&ws));
    let scale = spec.upscale();
    let mut jobs = Vec::new();
    for (r, &h) in hs.iter().enumerate() {
        for (c, &w) in ws.iter().enumerate() {
            let y0 = ys[r].saturating_sub(overlap);
            let x0 = xs[c].saturating_sub(overlap);
            let y1 = (ys[r] + h + overlap).min(s.h);
            let x1 = (xs[c] + w + overlap).min(s.w);
            jobs.push((y0, x0, y1, x1));
        }
    }
    let outputs: Vec<Tensor> = jobs
        .par_iter()
        .map(|&(y0, x0, y1, x1)| single_pass(net, &view(image, Slice2D::new(y0, x0, y1 - y0, x1 - x0))?))
        .collect::<Result<_>>()?;

    let out_shape = Shape::new(s.n, spec.out_channels, s.h * scale, s.w * scale);
    let mut acc = Tensor::zeros(out_shape);
    let mut wsum = vec![0f64; out_shape.h * out_shape.w];
    for (&(y0, x0, y1, x1), t) in jobs.iter().zip(&outputs) {
        for oy in y0 * scale..y1 * scale {
            let uy = (oy as f64 + 0.5) / scale as f64;
            let wy = if overlap == 0 { 1.0 } else { ramp(uy, y0, y1, s.h, overlap) };
            for ox in x0 * scale..x1 * scale {
                let ux = (ox as f64 + 0.5) / scale as f64;
                let wx = if overlap == 0 { 1.0 } else { ramp(ux, x0, x1, s.w, overlap) };
                let wgt = wy * wx;
                if wgt <= 0.0 {
                    continue;
                }
                wsum[oy * out_shape.w + ox] += wgt;
                for n in 0..s.n {
                    for c in 0..out_shape.c {
                        let v = t.at(n, c, oy - y0 * scale, ox - x0 * scale) as f64 * wgt;
                        let i = acc.index(n, c, oy, ox);
                        acc.data_mut()[i] += v as f32;
                    }
                }
            }
        }
    }
    for oy in 0..out_shape.h {
        for ox in 0..out_shape.w {
            let w = wsum[oy * out_shape.w + ox] as f32;
            for n in 0..s.n {
                for c in 0..out_shape.c {
                    let i = acc.index(n, c, oy, ox);
                    acc.data_mut()[i] /= w;
                }
            }
        }
    }
    Ok(acc)
}

/// A plain stack of `depth` odd-kernel convolutions with leaky ReLU
/// between them, `in_ch -> width -> ... -> out_ch`.
pub fn conv_stack(depth: usize, in_ch: usize, width: usize, out_ch: usize, kernel: usize, padding: ConvPadding) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut ch = in_ch;
    for i in 0..depth {
        let out = if i + 1 == depth { out_ch } else { width };
        layers.push(LayerSpec::Conv { in_channels: ch, out_channels: out, kernel, stride: 1, padding });
        if i + 1 < depth {
            layers.push(LayerSpec::Act { act: Activation::LeakyRelu { slope: 0.2 } });
        }
        ch = out;
    }
    NetworkSpec { z_channels: in_ch, z_spatial: 1, out_channels: out_ch, layers }
}

/// A small super-resolution style network: convolutions, then a
/// `factor x factor` pixel shuffle, then a final convolution.
pub fn sr_stack(in_ch: usize, width: usize, factor: usize) -> NetworkSpec {
    let lrelu = LayerSpec::Act { act: Activation::LeakyRelu { slope: 0.2 } };
    let zero = |i, o| LayerSpec::Conv { in_channels: i, out_channels: o, kernel: 3, stride: 1, padding: ConvPadding::Zero };
    NetworkSpec {
        z_channels: in_ch,
        z_spatial: 1,
        out_channels: in_ch,
        layers: vec![
            zero(in_ch, width),
            lrelu.clone(),
            zero(width, in_ch * factor * factor),
            LayerSpec::PixelShuffle { factor },
            zero(in_ch, in_ch),
        ],
    }
}
