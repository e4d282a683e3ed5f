//! Shared oracles for integration and acceptance tests.
//!
//! Everything here works on whole tensors with explicit pixel indexing and
//! does not use the halo exchange code it is meant to check.

#![allow(dead_code)]

use std::collections::HashMap;

use lpad_core::engine::LatentMode;
use lpad_core::halo::{Border, Borders};
use lpad_core::netspec::{build_texture_generator, ConvPadding};
use lpad_core::network::{Executor, Network};
use lpad_core::nn::{conv2d_valid, ConvKernel};
use lpad_core::rng::{seeded, uniform_tensor};
use lpad_core::stream::{StreamConfig, StreamState, WindowReplay};
use lpad_core::tensor::max_abs_diff;
use lpad_core::{Result, Shape, Slice2D, Tensor};

pub fn texture_generator(weight_seed: u64) -> Network {
    Network::random(&build_texture_generator(5, 32, 4, 64).unwrap(), weight_seed).unwrap()
}

pub fn small_generator(weight_seed: u64) -> Network {
    Network::random(&build_texture_generator(3, 16, 2, 8).unwrap(), weight_seed).unwrap()
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    uniform_tensor(Shape::new(1, c, h, w), -1.0, 1.0, &mut seeded(seed, 0))
}

/// A smooth image with some texture, for seam comparisons.
pub fn smooth_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let noise = random_image(c, h, w, seed);
    Tensor::from_fn(Shape::new(1, c, h, w), |n, ch, y, x| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let base = (6.0 * fx + 2.0 * ch as f32).sin() * (4.0 * fy + seed as f32).cos();
        0.7 * base + 0.1 * noise.at(n, ch, y, x)
    })
}

/// Pads `x` by `h` on every side that is not [`Border::None`]: columns
/// first, then rows, reading cached strips by their documented layout.
pub fn pad_with_borders(x: &Tensor, h: usize, b: &Borders) -> Tensor {
    let s = x.shape();
    let ext = |bd: &Border| if matches!(bd, Border::None) { 0 } else { h };
    let (l, r, t, btm) = (ext(&b.left), ext(&b.right), ext(&b.top), ext(&b.bottom));
    let (w, ht) = (s.w as isize, s.h as isize);

    // Column pass value at (gy, gx), gy inside the tensor.
    let col = |n: usize, c: usize, gy: isize, gx: isize| -> f32 {
        let y = gy as usize;
        if gx < 0 {
            match &b.left {
                Border::Cached(t) => t.at(n, c, y, (t.shape().w as isize + gx) as usize),
                _ => x.at(n, c, y, 0),
            }
        } else if gx >= w {
            match &b.right {
                Border::Cached(t) => t.at(n, c, y, (gx - w) as usize),
                _ => x.at(n, c, y, s.w - 1),
            }
        } else {
            x.at(n, c, y, gx as usize)
        }
    };
    let cap = |t: &Tensor, n: usize, c: usize, row: usize, gx: isize| -> f32 {
        let tw = t.shape().w as isize;
        let cx = if tw == w + 2 * h as isize { gx + h as isize } else { gx.clamp(0, w - 1) };
        t.at(n, c, row, cx as usize)
    };
    let out_shape = Shape::new(s.n, s.c, s.h + t + btm, s.w + l + r);
    Tensor::from_fn(out_shape, |n, c, oy, ox| {
        let gy = oy as isize - t as isize;
        let gx = ox as isize - l as isize;
        if gy < 0 {
            match &b.top {
                Border::Cached(tc) => cap(tc, n, c, (tc.shape().h as isize + gy) as usize, gx),
                _ => col(n, c, 0, gx),
            }
        } else if gy >= ht {
            match &b.bottom {
                Border::Cached(bc) => cap(bc, n, c, (gy - ht) as usize, gx),
                _ => col(n, c, ht - 1, gx),
            }
        } else {
            col(n, c, gy, gx)
        }
    })
}

fn pad_zero_full(x: &Tensor, h: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h + 2 * h, s.w + 2 * h), |n, c, y, xx| {
        if y < h || xx < h || y >= s.h + h || xx >= s.w + h {
            0.0
        } else {
            x.at(n, c, y - h, xx - h)
        }
    })
}

/// Single-pass executor whose halo-consuming convolutions are padded by
/// per-convolution borders. Records each such convolution's input.
pub struct BorderedExecutor {
    pub borders: Vec<Borders>,
    pub inputs: Vec<(usize, Tensor)>,
}

impl BorderedExecutor {
    pub fn new(borders: Vec<Borders>) -> Self {
        BorderedExecutor { borders, inputs: Vec::new() }
    }
}

impl Executor for BorderedExecutor {
    type Value = Tensor;

    fn local(&mut self, v: Tensor, op: &(dyn Fn(&Tensor) -> Result<Tensor> + Sync)) -> Result<Tensor> {
        op(&v)
    }

    fn conv(&mut self, v: &Tensor, k: &ConvKernel, stride: usize, padding: ConvPadding) -> Result<Tensor> {
        let h = k.halo();
        if h == 0 {
            return conv2d_valid(v, k, stride);
        }
        let idx = self.inputs.len();
        self.inputs.push((h, v.clone()));
        let padded = match padding {
            ConvPadding::External => {
                pad_with_borders(v, h, self.borders.get(idx).unwrap_or(&Borders::replicate()))
            }
            ConvPadding::Zero => pad_zero_full(v, h),
            ConvPadding::Valid => v.clone(),
        };
        conv2d_valid(&padded, k, stride)
    }

    fn add(&mut self, a: Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
}

/// Recomputes a recorded window in one pass.
pub fn replay_oracle(net: &Network, w: &WindowReplay) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let mut e = BorderedExecutor::new(w.borders.clone());
    let out = net.forward(&mut e, w.latents.assemble()?)?;
    Ok((out, e.inputs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Right,
    Band,
}

#[derive(Clone, Debug, Default)]
pub struct ReplayReport {
    pub windows: usize,
    pub regenerated_patches: usize,
    /// Over regenerated patches only.
    pub max_regenerated_diff: f32,
    /// Over every patch of every window.
    pub max_patch_diff: f32,
    /// Cached borders against the oracle's own features of earlier windows.
    pub max_cache_diff: f32,
    pub cache_checks: usize,
}

fn strip(t: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Tensor {
    t.view(Slice2D::new(y, x, h, w)).unwrap()
}

/// Drives a growing stream through `steps`, checking every window against
/// [`replay_oracle`] and every cached border against oracle features.
pub fn replay_stream(net: &Network, seed: u64, grid: usize, rows: usize, steps: &[Step]) -> Result<ReplayReport> {
    let cfg = StreamConfig {
        open_bottom: true,
        grow_down: true,
        keep_replay: true,
        mode: LatentMode::Gaussian,
        ..StreamConfig::new(grid, rows)
    };
    let p = net.spec().patch_extent();
    let (mut st, _) = StreamState::init(net, seed, cfg)?;
    let mut rep = ReplayReport::default();
    // Right strips of the last finalized column, per conv.
    let mut right: Vec<Tensor> = Vec::new();
    // (band row, canvas column) -> bottom strips of the last finalized row.
    let mut bottoms: HashMap<(usize, usize), Vec<Tensor>> = HashMap::new();

    let mut check = |w: &WindowReplay, rep: &mut ReplayReport| -> Result<()> {
        let (band_row, c0) = w.latents.origin;
        let (img, inputs) = replay_oracle(net, w)?;
        rep.windows += 1;
        for r in 0..rows {
            for c in 0..grid {
                let want = strip(&img, r * p, c * p, p, p);
                let d = max_abs_diff(w.output.patch(r, c), &want)?;
                rep.max_patch_diff = rep.max_patch_diff.max(d);
                if (c == 0 && w.regenerated_col) || (r == 0 && w.regenerated_row) {
                    rep.regenerated_patches += 1;
                    rep.max_regenerated_diff = rep.max_regenerated_diff.max(d);
                }
            }
        }
        for (j, (h, x)) in inputs.iter().enumerate() {
            let h = *h;
            let fw = x.shape().w / grid;
            let b = &w.borders[j];
            if w.regenerated_col {
                if let Border::Cached(t) = &b.left {
                    rep.max_cache_diff = rep.max_cache_diff.max(max_abs_diff(t, &right[j])?);
                    rep.cache_checks += 1;
                } else {
                    rep.max_cache_diff = f32::INFINITY;
                }
            }
            if w.regenerated_row {
                if let Border::Cached(t) = &b.top {
                    let above = band_row - (rows - 1);
                    let th = t.shape().h;
                    for c in 0..grid {
                        let want = &bottoms[&(above, c0 + c)][j];
                        let got = strip(t, th - h, h + c * fw, h, fw);
                        rep.max_cache_diff = rep.max_cache_diff.max(max_abs_diff(&got, want)?);
                    }
                    if c0 > 0 {
                        let prev = &bottoms[&(above, c0 - 1)][j];
                        let want = strip(prev, 0, fw - h, h, h);
                        let got = strip(t, th - h, 0, h, h);
                        rep.max_cache_diff = rep.max_cache_diff.max(max_abs_diff(&got, &want)?);
                    }
                    rep.cache_checks += 1;
                } else {
                    rep.max_cache_diff = f32::INFINITY;
                }
            }
        }
        right = inputs
            .iter()
            .map(|(h, x)| {
                let fw = x.shape().w / grid;
                strip(x, 0, (grid - 1) * fw - h, x.shape().h, *h)
            })
            .collect();
        for c in 0..grid - 1 {
            let v = inputs
                .iter()
                .map(|(h, x)| {
                    let (fh, fw) = (x.shape().h / rows, x.shape().w / grid);
                    strip(x, (rows - 1) * fh - h, c * fw, *h, fw)
                })
                .collect();
            bottoms.insert((band_row, c0 + c), v);
        }
        Ok(())
    };

    check(st.last_window().expect("replay kept"), &mut rep)?;
    for step in steps {
        match step {
            Step::Right => st.extend_right()?,
            Step::Band => st.next_band(false)?,
        };
        check(st.last_window().expect("replay kept"), &mut rep)?;
    }
    assert_eq!(rep.windows, st.counters().windows);
    Ok(rep)
}

/// The script used by the replay checks: three bands, each one column
/// narrower than the one above.
pub const STAIRCASE: &[Step] =
    &[Step::Right, Step::Right, Step::Right, Step::Band, Step::Right, Step::Right, Step::Band, Step::Right];
