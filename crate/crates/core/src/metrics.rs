//! Image measurements: seam ratios, per-pixel diversity and patch
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// A vertical line between columns `pos - 1` and `pos`.
    Vertical,
    /// A horizontal line between rows `pos - 1` and `pos`.
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seam {
    pub axis: Axis,
    pub pos: usize,
}

impl Seam {
    pub fn vertical(pos: usize) -> Self {
        Seam { axis: Axis::Vertical, pos }
    }

    pub fn horizontal(pos: usize) -> Self {
        Seam { axis: Axis::Horizontal, pos }
    }
}

/// Interior patch boundaries of a `width x height` image cut into
/// `patch x patch` tiles.
pub fn patch_seams(width: usize, height: usize, patch: usize) -> Vec<Seam> {
    let mut out: Vec<Seam> = (1..width.div_ceil(patch)).map(|i| Seam::vertical(i * patch)).collect();
    out.extend((1..height.div_ceil(patch)).map(|i| Seam::horizontal(i * patch)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamConfig {
    /// Number of comparison lines per seam.
    pub baseline_lines: usize,
    /// Spacing between comparison lines. Matching it to the period of any
    /// upsampling structure keeps the comparison lines in phase with the
    /// seam.
    pub stride: usize,
}

impl Default for SeamConfig {
    fn default() -> Self {
        SeamConfig { baseline_lines: 8, stride: 1 }
    }
}

impl SeamConfig {
    /// Comparison lines every `period` pixels. For a generator whose
    /// latent pixels are upsampled by `period`, this compares a seam only
    /// with other latent-pixel boundaries.
    pub fn phase_matched(period: usize) -> Self {
        SeamConfig { baseline_lines: 8, stride: period.max(1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamRatio {
    pub seam: Seam,
    /// Mean absolute first difference across the seam.
    pub across: f64,
    /// Mean of the same quantity over the comparison lines.
    pub baseline: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub seams: Vec<SeamRatio>,
    pub max: f64,
    pub mean: f64,
}

fn line_diff(img: &Tensor, axis: Axis, pos: usize) -> f64 {
    let s = img.shape();
    let mut sum = 0f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let p = img.plane(n, c);
            match axis {
                Axis::Vertical => {
                    for y in 0..s.h {
                        sum += (p[y * s.w + pos] - p[y * s.w + pos - 1]).abs() as f64;
                    }
                }
                Axis::Horizontal => {
                    let (a, b) = (&p[pos * s.w..(pos + 1) * s.w], &p[(pos - 1) * s.w..pos * s.w]);
                    sum += a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
                }
            }
        }
    }
    let count = s.n * s.c * if axis == Axis::Vertical { s.h } else { s.w };
    sum / count as f64
}

fn ratio(across: f64, baseline: f64) -> f64 {
    match (across == 0.0, baseline == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => across / baseline,
    }
}

/// Seam ratios: the mean absolute difference across each seam line over
/// the mean across the nearest comparison lines that are not themselves
/// listed as seams. Constant images give 1.
pub fn seam_metric(img: &Tensor, seams: &[Seam], cfg: SeamConfig) -> Result<SeamReport> {
    let s = img.shape();
    if cfg.stride == 0 || cfg.baseline_lines == 0 {
        return Err(Error::Metric("stride and baseline line count must be positive".into()));
    }
    let mut out = Vec::with_capacity(seams.len());
    for &seam in seams {
        let len = if seam.axis == Axis::Vertical { s.w } else { s.h };
        if seam.pos == 0 || seam.pos >= len {
            return Err(Error::Metric(format!("seam {seam:?} is on or outside the image border")));
        }
        let is_seam = |p: usize| seams.iter().any(|o| o.axis == seam.axis && o.pos == p);
        let mut lines = Vec::with_capacity(cfg.baseline_lines);
        let mut k = 1;
        while lines.len() < cfg.baseline_lines {
            let d = k * cfg.stride;
            if d >= len {
                break;
            }
            for p in [seam.pos.checked_sub(d), Some(seam.pos + d)].into_iter().flatten() {
                if p > 0 && p < len && !is_seam(p) && lines.len() < cfg.baseline_lines {
                    lines.push(p);
                }
            }
            k += 1;
        }
        if lines.len() < cfg.baseline_lines {
            return Err(Error::Metric(format!(
                "seam {seam:?} has only {} comparison lines, {} needed",
                lines.len(),
                cfg.baseline_lines
            )));
        }
        let across = line_diff(img, seam.axis, seam.pos);
        let baseline = lines.iter().map(|&p| line_diff(img, seam.axis, p)).sum::<f64>() / lines.len() as f64;
        out.push(SeamRatio { seam, across, baseline, ratio: ratio(across, baseline) });
    }
    let max = out.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let mean = if out.is_empty() { 0.0 } else { out.iter().map(|r| r.ratio).sum::<f64>() / out.len() as f64 };
    Ok(SeamReport { seams: out, max, mean })
}

/// Upper `q` quantile (nearest rank) of `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Metric("quantile of an empty set or q outside [0, 1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Seam ratios of the layout `seams` shifted by each of `offsets`, measured
/// on images that contain no seams. The shifted layout keeps the same
/// spacing, so comparison lines are excluded exactly as they are for the
/// real seams. Shifts that move a seam onto or past the border are skipped.
pub fn offset_seam_ratios(img: &Tensor, seams: &[Seam], offsets: &[isize], cfg: SeamConfig) -> Result<Vec<f64>> {
    let s = img.shape();
    let mut out = Vec::new();
    for &o in offsets {
        let shifted: Option<Vec<Seam>> = seams
            .iter()
            .map(|seam| {
                let len = if seam.axis == Axis::Vertical { s.w } else { s.h };
                seam.pos.checked_add_signed(o).filter(|&p| p > 0 && p < len).map(|pos| Seam { pos, ..*seam })
            })
            .collect();
        if let Some(shifted) = shifted {
            out.extend(seam_metric(img, &shifted, cfg)?.seams.iter().map(|r| r.ratio));
        }
    }
    Ok(out)
}

/// The `q` quantile of [`offset_seam_ratios`] pooled over `images`: a
/// threshold below which a real seam is indistinguishable from the
/// interior.
pub fn calibrate_tau(images: &[Tensor], seams: &[Seam], offsets: &[isize], cfg: SeamConfig, q: f64) -> Result<f64> {
    let mut ratios = Vec::new();
    for img in images {
        ratios.extend(offset_seam_ratios(img, seams, offsets, cfg)?);
    }
    quantile(&ratios, q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityMap {
    pub k: usize,
    /// Unbiased per-element standard deviation, same shape as a sample.
    pub std: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub band: usize,
    pub band_mean: f64,
    pub interior_mean: f64,
    pub ratio: f64,
    pub min: f64,
    pub max: f64,
}

impl DiversityMap {
    /// Standard deviation averaged over channels, row-major `h x w`.
    pub fn pixel_map(&self) -> Vec<f32> {
        let s = self.std.shape();
        let mut out = vec![0f32; s.h * s.w];
        for n in 0..s.n {
            for c in 0..s.c {
                for (o, v) in out.iter_mut().zip(self.std.plane(n, c)) {
                    *o += v;
                }
            }
        }
        let k = (s.n * s.c) as f32;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// Mean std within `band` pixels of the border against the mean over
    /// the rest. `band` defaults to `max(1, min(h, w) / 8)`.
    pub fn band_stats(&self, band: Option<usize>) -> Result<BandStats> {
        let s = self.std.shape();
        let band = band.unwrap_or_else(|| (s.h.min(s.w) / 8).max(1));
        if 2 * band >= s.h.min(s.w) {
            return Err(Error::Metric(format!("band {band} leaves no interior in {}x{}", s.h, s.w)));
        }
        let map = self.pixel_map();
        let (mut bsum, mut bn, mut isum, mut inn) = (0f64, 0usize, 0f64, 0usize);
        for y in 0..s.h {
            for x in 0..s.w {
                let v = map[y * s.w + x] as f64;
                if y < band || x < band || y >= s.h - band || x >= s.w - band {
                    bsum += v;
                    bn += 1;
                } else {
                    isum += v;
                    inn += 1;
                }
            }
        }
        let (band_mean, interior_mean) = (bsum / bn as f64, isum / inn as f64);
        let min = self.std.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let max = self.std.data().iter().copied().fold(0f32, f32::max) as f64;
        Ok(BandStats { band, band_mean, interior_mean, ratio: ratio(band_mean, interior_mean), min, max })
    }
}

/// Unbiased per-element standard deviation over `k` samples drawn by
/// calling `sampler(0..k)`.
pub fn diversity_map(mut sampler: impl FnMut(usize) -> Result<Tensor>, k: usize) -> Result<DiversityMap> {
    if k < 2 {
        return Err(Error::Metric("diversity needs at least two samples".into()));
    }
    let first = sampler(0)?;
    let shape = first.shape();
    let mut mean: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    let mut m2 = vec![0f64; shape.len()];
    for i in 1..k {
        let t = sampler(i)?;
        if t.shape() != shape {
            return Err(Error::shape(format!("sample {i} is {}, first was {shape}", t.shape())));
        }
        let n = (i + 1) as f64;
        for ((m, q), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(t.data()) {
            let v = v as f64;
            let d = v - *m;
            *m += d / n;
            *q += d * (v - *m);
        }
    }
    let std = m2.iter().map(|q| (q / (k - 1) as f64).sqrt() as f32).collect();
    Ok(DiversityMap { k, std: Tensor::from_vec(shape, std)? })
}

pub const HIST_BINS: usize = 16;

fn bin(v: f32) -> usize {
    (((v + 1.0) * 0.5 * HIST_BINS as f32).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub means: Vec<f32>,
    pub stds: Vec<f32>,
    /// Per channel, normalised 16-bin histogram over `[-1, 1]`.
    pub hist: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub extent: usize,
    pub patches: Vec<PatchSummary>,
}

/// Statistics of every whole `extent x extent` patch; partial patches at
/// the right and bottom are ignored.
pub fn patch_stats(img: &Tensor, extent: usize) -> Result<PatchStats> {
    let s = img.shape();
    if extent == 0 || extent > s.h || extent > s.w || s.n != 1 {
        return Err(Error::Metric(format!("patch extent {extent} does not fit {s}")));
    }
    let mut patches = Vec::new();
    let npix = (extent * extent) as f64;
    for py in 0..s.h / extent {
        for px in 0..s.w / extent {
            let mut summary = PatchSummary { means: vec![], stds: vec![], hist: vec![] };
            for c in 0..s.c {
                let mut h = vec![0f32; HIST_BINS];
                let (mut sum, mut sq) = (0f64, 0f64);
                for y in py * extent..(py + 1) * extent {
                    for x in px * extent..(px + 1) * extent {
                        let v = img.at(0, c, y, x);
                        sum += v as f64;
                        sq += (v as f64).powi(2);
                        h[bin(v)] += 1.0;
                    }
                }
                let mean = sum / npix;
                summary.means.push(mean as f32);
                summary.stds.push((sq / npix - mean * mean).max(0.0).sqrt() as f32);
                summary.hist.push(h.iter().map(|v| v / npix as f32).collect());
            }
            patches.push(summary);
        }
    }
    Ok(PatchStats { extent, patches })
}

impl PatchStats {
    /// Per channel histogram of the whole patch population.
    pub fn population(&self) -> Vec<Vec<f64>> {
        let channels = self.patches.first().map_or(0, |p| p.hist.len());
        let mut out = vec![vec![0f64; HIST_BINS]; channels];
        for p in &self.patches {
            for (o, h) in out.iter_mut().zip(&p.hist) {
                for (a, b) in o.iter_mut().zip(h) {
                    *a += *b as f64;
                }
            }
        }
        let n = self.patches.len() as f64;
        out.iter_mut().flatten().for_each(|v| *v /= n);
        out
    }

    /// Histogram distance between two patch populations: per channel, twice
    /// the mean absolute difference of the cumulative histograms (a binned
    /// 1-Wasserstein distance on `[-1, 1]`), averaged over channels. Ranges
    /// from 0 to `2 * 15 / 16`.
    pub fn distance(&self, other: &PatchStats) -> Result<f64> {
        let (a, b) = (self.population(), other.population());
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Metric("patch populations have different channel counts".into()));
        }
        let mut total = 0.0;
        for (ha, hb) in a.iter().zip(&b) {
            let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
            for (x, y) in ha.iter().zip(hb) {
                ca += x;
                cb += y;
                acc += f64::abs(ca - cb);
            }
            total += 2.0 * acc / HIST_BINS as f64;
        }
        Ok(total / a.len() as f64)
    }
}

/// Splits `img` into whole patches and returns them in row-major order.
pub fn patches_of(img: &Tensor, extent: usize) -> Result<Vec<Tensor>> {
    let s = img.shape();
    let mut out = Vec::new();
    for py in 0..s.h / extent {
        for px in 0..s.w / extent {
            out.push(crate::tensor::view(img, crate::tensor::Slice2D::new(py * extent, px * extent, extent, extent))?);
        }
    }
    Ok(out)
}

/// Constant image helper for tests and examples.
pub fn constant_image(h: usize, w: usize, v: f32) -> Tensor {
    Tensor::filled(Shape::new(1, 3, h, w), v)
}
