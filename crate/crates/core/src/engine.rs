//! Joint patch-grid generation.
//!
//! [`generate_block`] runs a network over an `R x C` grid of latents,
//! exchanging halos before every spatial convolution and applying
//! per-pixel ops, batch norm and upsampling to each patch on its own.
//! [`oracle_full_pass`] is the reference: it concatenates the latents first
//! and runs the network once with replicate padding.

use std::f64::consts::TAU;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halo::{exchange_halos, extract_strip, pad_replicate, pad_zero, Borders, FeatureGrid, HaloSpec, Side, Sides};
use crate::netspec::{ConvPadding, NetworkSpec};
use crate::network::{Executor, Network};
use crate::nn::{conv2d_valid, ConvKernel};
use crate::rng::{cell_stream, normal_tensor, seeded, uniform_tensor};
use crate::tensor::{concat_spatial, Shape, Tensor};

/// Training-time grid size.
pub const DEFAULT_GRID: usize = 3;

const PHASE_STREAM: u64 = 0x5048_4153;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Halo exchange between patches, replicate at open borders.
    Local,
    /// Each patch zero-padded on its own.
    ZeroAblation,
}

/// Fixed-frequency plane waves written over the first `channels` latent
/// channels. Channel `k` runs along x when `k` is even and along y when odd,
/// with angular frequency `omega * (1 + k / 2)` per latent pixel and a
/// per-seed random phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicSpec {
    pub channels: usize,
    pub omega: f32,
}

impl Default for PeriodicSpec {
    fn default() -> Self {
        PeriodicSpec { channels: 2, omega: std::f32::consts::FRAC_PI_4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// i.i.d. standard normal.
    #[default]
    Gaussian,
    /// i.i.d. uniform on `[-1, 1)`.
    Uniform,
    /// Gaussian with some channels replaced by plane waves in global
    /// coordinates, so the waves continue across patch boundaries.
    PeriodicMix(PeriodicSpec),
}

impl LatentMode {
    pub fn periodic() -> Self {
        LatentMode::PeriodicMix(PeriodicSpec::default())
    }
}

/// Latents for an `rows x cols` block of canvas cells whose top-left cell is
/// `origin` (in patch units).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub origin: (usize, usize),
    pub seed: u64,
    pub mode: LatentMode,
    pub z: Vec<Tensor>,
}

impl LatentGrid {
    pub fn cell(&self, r: usize, c: usize) -> &Tensor {
        &self.z[r * self.cols + c]
    }

    pub fn assemble(&self) -> Result<Tensor> {
        concat_spatial(self.rows, self.cols, &self.z)
    }
}

/// Periodic-wave parameters `(omega, phase)` for channel `k`.
pub fn wave_params(seed: u64, p: &PeriodicSpec, k: usize) -> (f64, f64) {
    let omega = p.omega as f64 * (1 + k / 2) as f64;
    let phase = seeded(seed, PHASE_STREAM + k as u64).random_range(0.0..TAU);
    (omega, phase)
}

/// Latent of canvas cell `(row, col)`. Depends only on the seed, the cell
/// and the mode, never on which block it is sampled in.
pub fn sample_cell(spec: &NetworkSpec, seed: u64, mode: LatentMode, row: usize, col: usize) -> Tensor {
    let zs = spec.z_spatial;
    let shape = Shape::new(1, spec.z_channels, zs, zs);
    let mut rng = seeded(seed, cell_stream(row, col));
    match mode {
        LatentMode::Gaussian => normal_tensor(shape, &mut rng),
        LatentMode::Uniform => uniform_tensor(shape, -1.0, 1.0, &mut rng),
        LatentMode::PeriodicMix(p) => {
            let mut z = normal_tensor(shape, &mut rng);
            for k in 0..p.channels.min(spec.z_channels) {
                let (omega, phase) = wave_params(seed, &p, k);
                for y in 0..zs {
                    for x in 0..zs {
                        let g = if k % 2 == 0 { col * zs + x } else { row * zs + y };
                        z.set(0, k, y, x, (omega * g as f64 + phase).sin() as f32);
                    }
                }
            }
            z
        }
    }
}

pub fn sample_latent_grid(rows: usize, cols: usize, spec: &NetworkSpec, seed: u64, mode: LatentMode) -> Result<LatentGrid> {
    sample_latents_at((0, 0), rows, cols, spec, seed, mode)
}

pub fn sample_latents_at(
    origin: (usize, usize),
    rows: usize,
    cols: usize,
    spec: &NetworkSpec,
    seed: u64,
    mode: LatentMode,
) -> Result<LatentGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::shape("latent grid needs at least one row and column"));
    }
    spec.validate()?;
    let z = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| sample_cell(spec, seed, mode, origin.0 + r, origin.1 + c))
        .collect();
    Ok(LatentGrid { rows, cols, origin, seed, mode, z })
}

/// Which edge strips [`generate_block`] should keep, per halo-consuming
/// convolution, for later reuse as cached borders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecordRequest {
    /// Keep the right strip of every patch in this grid column.
    pub right_col: Option<usize>,
    /// Keep the bottom strip of every patch in this grid row.
    pub bottom_row: Option<usize>,
}

/// Edge strips of one convolution's (unpadded) input.
#[derive(Clone, Debug, PartialEq)]
pub struct StripRecord {
    pub conv: usize,
    pub halo: usize,
    /// One per grid row.
    pub right: Vec<Tensor>,
    /// One per grid column.
    pub bottom: Vec<Tensor>,
}

impl StripRecord {
    pub fn floats(&self) -> usize {
        self.right.iter().chain(&self.bottom).map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct BlockOptions {
    /// Borders for each halo-consuming convolution, by execution index.
    /// Missing entries mean open (replicate) borders.
    pub conv_borders: Vec<Borders>,
    pub record: RecordRequest,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub image: Tensor,
    pub rows: usize,
    pub cols: usize,
    /// Final per-patch outputs, row-major.
    pub patches: Vec<Tensor>,
    pub strips: Vec<StripRecord>,
}

impl BlockOutput {
    pub fn patch(&self, r: usize, c: usize) -> &Tensor {
        &self.patches[r * self.cols + c]
    }
}

/// Runs the network over a grid of patches.
pub struct GridExecutor<'a> {
    padding: PaddingMode,
    opts: &'a BlockOptions,
    next_conv: usize,
    strips: Vec<StripRecord>,
}

impl<'a> GridExecutor<'a> {
    pub fn new(padding: PaddingMode, opts: &'a BlockOptions) -> Self {
        GridExecutor { padding, opts, next_conv: 0, strips: Vec::new() }
    }

    pub fn into_strips(self) -> Vec<StripRecord> {
        self.strips
    }

    fn record(&mut self, g: &FeatureGrid, conv: usize, halo: usize) -> Result<()> {
        let req = self.opts.record;
        if req.right_col.is_none() && req.bottom_row.is_none() {
            return Ok(());
        }
        let mut rec = StripRecord { conv, halo, right: Vec::new(), bottom: Vec::new() };
        if let Some(c) = req.right_col {
            for r in 0..g.rows() {
                rec.right.push(extract_strip(g.patch(r, c), Side::Right, halo)?);
            }
        }
        if let Some(r) = req.bottom_row {
            for c in 0..g.cols() {
                rec.bottom.push(extract_strip(g.patch(r, c), Side::Bottom, halo)?);
            }
        }
        self.strips.push(rec);
        Ok(())
    }
}

fn map_patches(g: &FeatureGrid, f: impl Fn(&Tensor) -> Result<Tensor> + Sync + Send) -> Result<FeatureGrid> {
    let out: Result<Vec<Tensor>> = g.patches().par_iter().map(&f).collect();
    FeatureGrid::new(g.rows(), g.cols(), out?)
}

impl Executor for GridExecutor<'_> {
    type Value = FeatureGrid;

    fn local(&mut self, v: FeatureGrid, op: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync)) -> Result<FeatureGrid> {
        map_patches(&v, op)
    }

    fn conv(&mut self, v: &FeatureGrid, kernel: &ConvKernel, stride: usize, padding: ConvPadding) -> Result<FeatureGrid> {
        if stride != 1 {
            return Err(Error::Unsupported(format!("stride {stride} convolution in patch mode")));
        }
        let halo = kernel.halo();
        if halo == 0 {
            return map_patches(v, |p| conv2d_valid(p, kernel, 1));
        }
        let idx = self.next_conv;
        self.next_conv += 1;
        self.record(v, idx, halo)?;
        let spec = HaloSpec::new(halo)?;
        let padded = match (padding, self.padding) {
            (ConvPadding::External, PaddingMode::Local) => {
                let mut g = v.clone();
                g.borders = self.opts.conv_borders.get(idx).cloned().unwrap_or_default();
                exchange_halos(&g, spec)?
            }
            (ConvPadding::Valid, PaddingMode::Local) => {
                let mut g = v.clone();
                g.borders = Borders::none();
                exchange_halos(&g, spec)?
            }
            (ConvPadding::Valid, PaddingMode::ZeroAblation) => v.clone(),
            (ConvPadding::External, PaddingMode::ZeroAblation) | (ConvPadding::Zero, _) => {
                map_patches(v, |p| Ok(pad_zero(p, halo)))?
            }
        };
        map_patches(&padded, |p| conv2d_valid(p, kernel, 1))
    }

    fn add(&mut self, a: FeatureGrid, b: &FeatureGrid) -> Result<FeatureGrid> {
        let out: Result<Vec<Tensor>> =
            a.patches().par_iter().zip(b.patches().par_iter()).map(|(x, y)| x.add(y)).collect();
        FeatureGrid::new(a.rows(), a.cols(), out?)
    }
}

/// Runs the network once on a whole tensor. Convolutions marked
/// [`ConvPadding::External`] get replicate padding, [`ConvPadding::Zero`]
/// zero padding and [`ConvPadding::Valid`] none.
pub struct FullExecutor;

impl Executor for FullExecutor {
    type Value = Tensor;

    fn local(&mut self, v: Tensor, op: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync)) -> Result<Tensor> {
        op(&v)
    }

    fn conv(&mut self, v: &Tensor, kernel: &ConvKernel, stride: usize, padding: ConvPadding) -> Result<Tensor> {
        let halo = kernel.halo();
        match padding {
            ConvPadding::External => conv2d_valid(&pad_replicate(v, halo, Sides::ALL), kernel, stride),
            ConvPadding::Zero => conv2d_valid(&pad_zero(v, halo), kernel, stride),
            ConvPadding::Valid => conv2d_valid(v, kernel, stride),
        }
    }

    fn add(&mut self, a: Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
}

pub fn single_pass(net: &Network, input: &Tensor) -> Result<Tensor> {
    net.forward(&mut FullExecutor, input.clone())
}

fn check_latents(g: &LatentGrid, spec: &NetworkSpec) -> Result<()> {
    let expected = Shape::new(1, spec.z_channels, spec.z_spatial, spec.z_spatial);
    if g.z.len() != g.rows * g.cols {
        return Err(Error::shape("latent grid cell count"));
    }
    if let Some(bad) = g.z.iter().find(|z| z.shape() != expected) {
        return Err(Error::shape(format!("latent is {}, network expects {expected}", bad.shape())));
    }
    Ok(())
}

pub fn generate_block(g: &LatentGrid, net: &Network, padding: PaddingMode) -> Result<BlockOutput> {
    generate_block_with(g, net, padding, &BlockOptions::default())
}

/// [`generate_block`] with cached borders and strip recording.
pub fn generate_block_with(
    g: &LatentGrid,
    net: &Network,
    padding: PaddingMode,
    opts: &BlockOptions,
) -> Result<BlockOutput> {
    check_latents(g, net.spec())?;
    let grid = FeatureGrid::new(g.rows, g.cols, g.z.clone())?;
    let mut exec = GridExecutor::new(padding, opts);
    let out = net.forward(&mut exec, grid)?;
    let image = out.assemble()?;
    Ok(BlockOutput { image, rows: g.rows, cols: g.cols, patches: out.into_patches(), strips: exec.into_strips() })
}

/// Reference single pass over the concatenated latent grid.
pub fn oracle_full_pass(g: &LatentGrid, net: &Network) -> Result<Tensor> {
    check_latents(g, net.spec())?;
    single_pass(net, &g.assemble()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::build_texture_generator;
    use crate::tensor::max_abs_diff;

    fn small_generator() -> NetworkSpec {
        build_texture_generator(2, 8, 2, 4).unwrap()
    }

    #[test]
    fn latents_are_deterministic() {
        let spec = small_generator();
        let a = sample_latent_grid(2, 3, &spec, 9, LatentMode::Gaussian).unwrap();
        let b = sample_latent_grid(2, 3, &spec, 9, LatentMode::Gaussian).unwrap();
        assert_eq!(a, b);
        let c = sample_latent_grid(2, 3, &spec, 10, LatentMode::Gaussian).unwrap();
        assert_ne!(a.z, c.z);
        // Cell latents do not depend on the block they are drawn in.
        let shifted = sample_latents_at((1, 1), 1, 2, &spec, 9, LatentMode::Gaussian).unwrap();
        assert_eq!(shifted.cell(0, 0), a.cell(1, 1));
        assert_eq!(shifted.cell(0, 1), a.cell(1, 2));
    }

    #[test]
    fn gaussian_moments() {
        let spec = build_texture_generator(1, 8, 10, 25).unwrap();
        let g = sample_latent_grid(2, 2, &spec, 3, LatentMode::Gaussian).unwrap();
        let vals: Vec<f64> = g.z.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
        assert_eq!(vals.len(), 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn periodic_waves_continue_across_patches() {
        let spec = build_texture_generator(1, 8, 3, 4).unwrap();
        let p = PeriodicSpec::default();
        let g = sample_latent_grid(2, 3, &spec, 5, LatentMode::PeriodicMix(p)).unwrap();
        let whole = g.assemble().unwrap();
        let (omega, phase) = wave_params(5, &p, 0);
        let (omega_y, phase_y) = wave_params(5, &p, 1);
        for y in 0..6 {
            for x in 0..9 {
                assert_eq!(whole.at(0, 0, y, x), (omega * x as f64 + phase).sin() as f32);
                assert_eq!(whole.at(0, 1, y, x), (omega_y * y as f64 + phase_y).sin() as f32);
            }
        }
    }

    #[test]
    fn grid_matches_oracle() {
        let spec = small_generator();
        let net = Network::random(&spec, 4).unwrap();
        for (rows, cols) in [(1, 1), (1, 3), (3, 1), (2, 2), (2, 3), (3, 3)] {
            let g = sample_latent_grid(rows, cols, &spec, 11, LatentMode::Gaussian).unwrap();
            let block = generate_block(&g, &net, PaddingMode::Local).unwrap();
            let oracle = oracle_full_pass(&g, &net).unwrap();
            assert_eq!(max_abs_diff(&block.image, &oracle).unwrap(), 0.0, "{rows}x{cols}");
        }
    }

    #[test]
    fn zero_ablation_differs() {
        let spec = small_generator();
        let net = Network::random(&spec, 4).unwrap();
        let g = sample_latent_grid(3, 3, &spec, 2, LatentMode::Gaussian).unwrap();
        let block = generate_block(&g, &net, PaddingMode::ZeroAblation).unwrap();
        let oracle = oracle_full_pass(&g, &net).unwrap();
        assert!(max_abs_diff(&block.image, &oracle).unwrap() > 0.0);
    }

    #[test]
    fn zero_network_gives_zero_image() {
        let spec = small_generator();
        let net = Network::zeros(&spec).unwrap();
        let g = sample_latent_grid(2, 2, &spec, 1, LatentMode::Gaussian).unwrap();
        let img = oracle_full_pass(&g, &net).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_in_open_unit_interval() {
        let spec = small_generator();
        let net = Network::random(&spec, 8).unwrap();
        let g = sample_latent_grid(3, 3, &spec, 8, LatentMode::Gaussian).unwrap();
        let img = generate_block(&g, &net, PaddingMode::Local).unwrap().image;
        assert_eq!(img.shape(), Shape::new(1, 3, 24, 24));
        assert!(img.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn mismatched_latents_rejected() {
        let spec = small_generator();
        let net = Network::random(&spec, 8).unwrap();
        let other = build_texture_generator(2, 8, 3, 4).unwrap();
        let g = sample_latent_grid(1, 1, &other, 8, LatentMode::Gaussian).unwrap();
        assert!(matches!(generate_block(&g, &net, PaddingMode::Local), Err(Error::Shape(_))));
    }

    #[test]
    fn recorded_strips_are_edge_windows() {
        let spec = small_generator();
        let net = Network::random(&spec, 8).unwrap();
        let g = sample_latent_grid(2, 3, &spec, 8, LatentMode::Gaussian).unwrap();
        let opts = BlockOptions { record: RecordRequest { right_col: Some(1), bottom_row: Some(0) }, ..Default::default() };
        let out = generate_block_with(&g, &net, PaddingMode::Local, &opts).unwrap();
        assert_eq!(out.strips.len(), spec.spatial_convs().len());
        // First conv sees the latents themselves.
        let first = &out.strips[0];
        assert_eq!(first.right[1], extract_strip(g.cell(1, 1), Side::Right, 1).unwrap());
        assert_eq!(first.bottom[2], extract_strip(g.cell(0, 2), Side::Bottom, 1).unwrap());
    }
}
