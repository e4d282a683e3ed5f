//! Local padding: pad each patch with the boundary features of its
//! neighbours.
//!
//! A [`FeatureGrid`] holds the per-patch feature maps of one layer. Before a
//! `k x k` valid convolution every patch is grown by `halo = (k - 1) / 2`
//! pixels per side with [`exchange_halos`]:
//!
//! ```text
//!   +---+-----------+---+
//!   | d |  top nb   | d |      d: diagonal neighbour (corner)
//!   +---+-----------+---+
//!   |   |           |   |
//!   | l |   patch   | r |      l/r: left/right neighbour edge strips
//!   |   |           |   |
//!   +---+-----------+---+
//!   | d |  bottom   | d |
//!   +---+-----------+---+
//! ```
//!
//! Padding is built in two passes, columns first and then rows, which is the
//! same order [`pad_replicate`] uses. The row pass copies strips out of the
//! already column-padded vertical neighbour, so corners come from the
//! diagonal neighbour whenever it exists. With open borders the padded
//! patches are exactly the windows of `pad_replicate(concat(grid))`, so
//! per-patch convolution reproduces the single-pass result bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_h, concat_w, view, Shape, Slice2D, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Which sides [`pad_replicate`] extends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sides {
    pub left: bool,
    pub right: bool,
    pub top: bool,
    pub bottom: bool,
}

impl Sides {
    pub const ALL: Sides = Sides { left: true, right: true, top: true, bottom: true };
    pub const NONE: Sides = Sides { left: false, right: false, top: false, bottom: false };

    pub fn only(side: Side) -> Sides {
        let mut s = Sides::NONE;
        match side {
            Side::Left => s.left = true,
            Side::Right => s.right = true,
            Side::Top => s.top = true,
            Side::Bottom => s.bottom = true,
        }
        s
    }
}

/// Grows the spatial extent by `2 * halo` with a zero ring.
pub fn pad_zero(x: &Tensor, halo: usize) -> Tensor {
    if halo == 0 {
        return x.clone();
    }
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * halo, s.w + 2 * halo);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let d = (y + halo) * out_shape.w + halo;
                dst[d..d + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    out
}

/// Extends the selected sides by copying the nearest edge pixel outward.
/// Columns are padded first, then rows, so corners replicate the corner
/// pixel.
pub fn pad_replicate(x: &Tensor, halo: usize, sides: Sides) -> Tensor {
    let s = x.shape();
    let (l, r) = (if sides.left { halo } else { 0 }, if sides.right { halo } else { 0 });
    let (t, b) = (if sides.top { halo } else { 0 }, if sides.bottom { halo } else { 0 });
    if l + r + t + b == 0 {
        return x.clone();
    }
    let out_shape = Shape::new(s.n, s.c, s.h + t + b, s.w + l + r);
    let ow = out_shape.w;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                let d = (y + t) * ow;
                dst[d..d + l].fill(row[0]);
                dst[d + l..d + l + s.w].copy_from_slice(row);
                dst[d + l + s.w..d + ow].fill(row[s.w - 1]);
            }
            for y in 0..t {
                dst.copy_within(t * ow..(t + 1) * ow, y * ow);
            }
            let last = t + s.h - 1;
            for y in t + s.h..out_shape.h {
                dst.copy_within(last * ow..(last + 1) * ow, y * ow);
            }
        }
    }
    out
}

/// The strip of `width` pixels adjacent to `side`, spanning the full length
/// of that side.
pub fn extract_strip(x: &Tensor, side: Side, width: usize) -> Result<Tensor> {
    let s = x.shape();
    let extent = match side {
        Side::Left | Side::Right => s.w,
        Side::Top | Side::Bottom => s.h,
    };
    if width == 0 || width > extent {
        return Err(Error::Bounds(format!("strip width {width} on {side:?} of {s}")));
    }
    let slice = match side {
        Side::Left => Slice2D::new(0, 0, s.h, width),
        Side::Right => Slice2D::new(0, s.w - width, s.h, width),
        Side::Top => Slice2D::new(0, 0, width, s.w),
        Side::Bottom => Slice2D::new(s.h - width, 0, width, s.w),
    };
    view(x, slice)
}

/// How an outer edge of a grid is padded.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Border {
    /// Replicate the patch's own edge pixels.
    #[default]
    Replicate,
    /// Pad from a strip cached from a neighbour that is not part of the grid.
    ///
    /// Left/right strips stack the whole grid height (`sum of row heights`)
    /// and are at least `halo` wide; the `halo` columns nearest the grid are
    /// used. Top/bottom strips are at least `halo` tall and either exactly as
    /// wide as the grid, or wider by `halo` on each side, in which case the
    /// margins supply the diagonal corners. A strip without margins is
    /// extended by replicating its end columns.
    Cached(Tensor),
    /// No padding; the outer patches shrink under a valid convolution.
    None,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Borders {
    pub left: Border,
    pub right: Border,
    pub top: Border,
    pub bottom: Border,
}

impl Borders {
    pub fn replicate() -> Self {
        Borders::default()
    }

    pub fn none() -> Self {
        Borders { left: Border::None, right: Border::None, top: Border::None, bottom: Border::None }
    }

    pub fn get(&self, side: Side) -> &Border {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
            Side::Top => &self.top,
            Side::Bottom => &self.bottom,
        }
    }

    pub fn set(&mut self, side: Side, border: Border) {
        match side {
            Side::Left => self.left = border,
            Side::Right => self.right = border,
            Side::Top => self.top = border,
            Side::Bottom => self.bottom = border,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaloSpec {
    pub halo: usize,
}

impl HaloSpec {
    pub fn new(halo: usize) -> Result<Self> {
        if halo == 0 {
            return Err(Error::Halo("halo must be at least 1".into()));
        }
        Ok(HaloSpec { halo })
    }

    /// Halo consumed by a `k x k` valid convolution.
    pub fn for_kernel(k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Unsupported(format!("even kernel size {k}")));
        }
        HaloSpec::new((k - 1) / 2)
    }
}

/// An `rows x cols` arrangement of per-patch feature maps, row-major.
///
/// Patches in a row share their height and patches in a column share their
/// width; all share `n` and `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    patches: Vec<Tensor>,
    pub borders: Borders,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, patches: Vec<Tensor>) -> Result<Self> {
        FeatureGrid::with_borders(rows, cols, patches, Borders::replicate())
    }

    pub fn with_borders(rows: usize, cols: usize, patches: Vec<Tensor>, borders: Borders) -> Result<Self> {
        if rows == 0 || cols == 0 || patches.len() != rows * cols {
            return Err(Error::shape(format!(
                "grid {rows}x{cols} needs {} patches, got {}",
                rows * cols,
                patches.len()
            )));
        }
        let first = patches[0].shape();
        for r in 0..rows {
            for c in 0..cols {
                let s = patches[r * cols + c].shape();
                if s.n != first.n
                    || s.c != first.c
                    || s.h != patches[r * cols].shape().h
                    || s.w != patches[c].shape().w
                {
                    return Err(Error::shape(format!("patch ({r},{c}) is {s}, inconsistent with grid")));
                }
            }
        }
        Ok(FeatureGrid { rows, cols, patches, borders })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch(&self, r: usize, c: usize) -> &Tensor {
        &self.patches[r * self.cols + c]
    }

    pub fn patches(&self) -> &[Tensor] {
        &self.patches
    }

    pub fn into_patches(self) -> Vec<Tensor> {
        self.patches
    }

    pub fn row_heights(&self) -> Vec<usize> {
        (0..self.rows).map(|r| self.patch(r, 0).shape().h).collect()
    }

    pub fn col_widths(&self) -> Vec<usize> {
        (0..self.cols).map(|c| self.patch(0, c).shape().w).collect()
    }

    pub fn assemble(&self) -> Result<Tensor> {
        crate::tensor::concat_spatial(self.rows, self.cols, &self.patches)
    }
}

/// Pads every patch with `spec.halo` pixels taken from its neighbours, and
/// from the grid's [`Borders`] at the outer edges.
///
/// The returned grid holds the padded patches (and has [`Border::None`]
/// everywhere, since it is ready for a valid convolution).
pub fn exchange_halos(g: &FeatureGrid, spec: HaloSpec) -> Result<FeatureGrid> {
    let h = spec.halo;
    let heights = g.row_heights();
    let widths = g.col_widths();
    if let Some(&m) = heights.iter().chain(&widths).min() {
        if h > m {
            return Err(Error::Halo(format!("halo {h} exceeds patch extent {m}")));
        }
    }
    let first = g.patch(0, 0).shape();
    let total_h: usize = heights.iter().sum();
    let total_w: usize = widths.iter().sum();
    check_side_strip(&g.borders.left, h, first, total_h, Side::Left)?;
    check_side_strip(&g.borders.right, h, first, total_h, Side::Right)?;
    let top = prepare_cap(&g.borders.top, h, first, total_w, Side::Top)?;
    let bottom = prepare_cap(&g.borders.bottom, h, first, total_w, Side::Bottom)?;

    let pad_l = if matches!(g.borders.left, Border::None) { 0 } else { h };

    // Column pass.
    let mut colpad = Vec::with_capacity(g.patches.len());
    let mut y0 = 0;
    for r in 0..g.rows {
        for c in 0..g.cols {
            let p = g.patch(r, c);
            let mut parts = Vec::with_capacity(3);
            if c > 0 {
                parts.push(extract_strip(g.patch(r, c - 1), Side::Right, h)?);
            } else if let Some(s) = side_fill(&g.borders.left, p, h, y0, Side::Left)? {
                parts.push(s);
            }
            parts.push(p.clone());
            if c + 1 < g.cols {
                parts.push(extract_strip(g.patch(r, c + 1), Side::Left, h)?);
            } else if let Some(s) = side_fill(&g.borders.right, p, h, y0, Side::Right)? {
                parts.push(s);
            }
            colpad.push(if parts.len() == 1 { parts.pop().unwrap() } else { concat_w(&parts)? });
        }
        y0 += heights[r];
    }

    // Row pass, reading strips from the column-padded vertical neighbours.
    let mut padded = Vec::with_capacity(g.patches.len());
    for r in 0..g.rows {
        let mut x0 = 0;
        for c in 0..g.cols {
            let p = &colpad[r * g.cols + c];
            // Offset of this column-padded patch inside a margin-extended cap.
            let cap_left = x0 + h - if c == 0 { pad_l } else { h };
            let mut parts = Vec::with_capacity(3);
            if r > 0 {
                parts.push(extract_strip(&colpad[(r - 1) * g.cols + c], Side::Bottom, h)?);
            } else if let Some(s) = cap_fill(&top, p, h, cap_left, Side::Top)? {
                parts.push(s);
            }
            parts.push(p.clone());
            if r + 1 < g.rows {
                parts.push(extract_strip(&colpad[(r + 1) * g.cols + c], Side::Top, h)?);
            } else if let Some(s) = cap_fill(&bottom, p, h, cap_left, Side::Bottom)? {
                parts.push(s);
            }
            padded.push(if parts.len() == 1 { parts.pop().unwrap() } else { concat_h(&parts)? });
            x0 += widths[c];
        }
    }
    FeatureGrid::with_borders(g.rows, g.cols, padded, Borders::none())
}

fn check_side_strip(b: &Border, h: usize, first: Shape, total_h: usize, side: Side) -> Result<()> {
    if let Border::Cached(t) = b {
        let s = t.shape();
        if s.n != first.n || s.c != first.c || s.h != total_h {
            return Err(Error::Halo(format!(
                "{side:?} cached strip is {s}, expected {}x{}x{total_h}x>={h}",
                first.n, first.c
            )));
        }
        if s.w < h {
            return Err(Error::Halo(format!("{side:?} cached strip width {} < halo {h}", s.w)));
        }
    }
    Ok(())
}

/// Left/right fill for an outer patch whose rows start at `y0` in the grid.
fn side_fill(b: &Border, p: &Tensor, h: usize, y0: usize, side: Side) -> Result<Option<Tensor>> {
    let s = p.shape();
    match b {
        Border::None => Ok(None),
        Border::Replicate => {
            let edge = if side == Side::Left { 0 } else { s.w - 1 };
            let col = view(p, Slice2D::new(0, edge, s.h, 1))?;
            let sides = if side == Side::Left { Sides::only(Side::Left) } else { Sides::only(Side::Right) };
            let grown = pad_replicate(&col, h, sides);
            let keep = if side == Side::Left { 0 } else { 1 };
            Ok(Some(view(&grown, Slice2D::new(0, keep, s.h, h))?))
        }
        Border::Cached(t) => {
            let tw = t.shape().w;
            let left = if side == Side::Left { tw - h } else { 0 };
            Ok(Some(view(t, Slice2D::new(y0, left, s.h, h))?))
        }
    }
}

/// Top/bottom cached strip trimmed to `h` rows and extended to carry `h`
/// columns of margin on each side.
enum Cap {
    None,
    Replicate,
    Strip(Tensor),
}

fn prepare_cap(b: &Border, h: usize, first: Shape, total_w: usize, side: Side) -> Result<Cap> {
    match b {
        Border::None => Ok(Cap::None),
        Border::Replicate => Ok(Cap::Replicate),
        Border::Cached(t) => {
            let s = t.shape();
            if s.n != first.n || s.c != first.c {
                return Err(Error::Halo(format!("{side:?} cached strip is {s}, grid is {first}")));
            }
            if s.h < h {
                return Err(Error::Halo(format!("{side:?} cached strip height {} < halo {h}", s.h)));
            }
            let top = if side == Side::Top { s.h - h } else { 0 };
            if s.w == total_w + 2 * h {
                Ok(Cap::Strip(view(t, Slice2D::new(top, 0, h, s.w))?))
            } else if s.w == total_w {
                let rows = view(t, Slice2D::new(top, 0, h, s.w))?;
                let sides = Sides { left: true, right: true, top: false, bottom: false };
                Ok(Cap::Strip(pad_replicate(&rows, h, sides)))
            } else {
                Err(Error::Halo(format!(
                    "{side:?} cached strip width {} matches neither {total_w} nor {}",
                    s.w,
                    total_w + 2 * h
                )))
            }
        }
    }
}

fn cap_fill(cap: &Cap, p: &Tensor, h: usize, cap_left: usize, side: Side) -> Result<Option<Tensor>> {
    let s = p.shape();
    match cap {
        Cap::None => Ok(None),
        Cap::Replicate => {
            let edge = if side == Side::Top { 0 } else { s.h - 1 };
            let row = view(p, Slice2D::new(edge, 0, 1, s.w))?;
            let grown = pad_replicate(&row, h, Sides::only(side));
            let keep = if side == Side::Top { 0 } else { 1 };
            Ok(Some(view(&grown, Slice2D::new(keep, 0, h, s.w))?))
        }
        Cap::Strip(t) => Ok(Some(view(t, Slice2D::new(0, cap_left, h, s.w))?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d_valid, ConvKernel};
    use crate::tensor::{concat_spatial, max_abs_diff};
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    fn row(vals: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, rows.len(), rows[0].len()),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pad_zero_cases() {
        let x = t2(&[&[5.0]]);
        assert_eq!(pad_zero(&x, 1), t2(&[&[0., 0., 0.], &[0., 5., 0.], &[0., 0., 0.]]));
        assert_eq!(pad_zero(&x, 0), x);
        let r = random_tensor(Shape::new(1, 2, 3, 3), 1);
        let p = pad_zero(&r, 2);
        assert_eq!(p.shape(), Shape::new(1, 2, 7, 7));
        for c in 0..2 {
            for y in 0..7 {
                for xx in 0..7 {
                    let inside = (2..5).contains(&y) && (2..5).contains(&xx);
                    let expected = if inside { r.at(0, c, y - 2, xx - 2) } else { 0.0 };
                    assert_eq!(p.at(0, c, y, xx), expected);
                }
            }
        }
    }

    #[test]
    fn pad_replicate_cases() {
        let x = t2(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(
            pad_replicate(&x, 1, Sides::ALL),
            t2(&[&[1., 1., 2., 2.], &[1., 1., 2., 2.], &[3., 3., 4., 4.], &[3., 3., 4., 4.]])
        );
        assert_eq!(pad_replicate(&x, 0, Sides::ALL), x);
        let r = random_tensor(Shape::new(1, 2, 3, 4), 2);
        let p = pad_replicate(&r, 2, Sides::only(Side::Left));
        assert_eq!(p.shape(), Shape::new(1, 2, 3, 6));
        for c in 0..2 {
            for y in 0..3 {
                assert_eq!(p.at(0, c, y, 0), r.at(0, c, y, 0));
                assert_eq!(p.at(0, c, y, 1), r.at(0, c, y, 0));
                for xx in 0..4 {
                    assert_eq!(p.at(0, c, y, xx + 2), r.at(0, c, y, xx));
                }
            }
        }
    }

    #[test]
    fn extract_strip_cases() {
        let x = t2(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(extract_strip(&x, Side::Right, 1).unwrap(), t2(&[&[2.], &[4.]]));
        assert_eq!(extract_strip(&x, Side::Top, 2).unwrap(), x);
        assert!(extract_strip(&x, Side::Left, 3).is_err());
        let r = random_tensor(Shape::new(1, 3, 5, 4), 3);
        assert_eq!(
            extract_strip(&r, Side::Bottom, 2).unwrap(),
            view(&r, Slice2D::new(3, 0, 2, 4)).unwrap()
        );
    }

    #[test]
    fn one_dimensional_row_exchange() {
        let (a, b, c) = (row(&[1., 2., 3.]), row(&[4., 5., 6.]), row(&[7., 8., 9.]));
        let g = FeatureGrid::new(1, 3, vec![a, b, c]).unwrap();
        let p = exchange_halos(&g, HaloSpec::new(1).unwrap()).unwrap();
        // Middle row of the padded patches (the top/bottom halo replicates it).
        let mid = |t: &Tensor| view(t, Slice2D::new(1, 0, 1, 5)).unwrap().into_data();
        assert_eq!(mid(p.patch(0, 1)), vec![3., 4., 5., 6., 7.]);
        assert_eq!(mid(p.patch(0, 0)), vec![1., 1., 2., 3., 4.]);
        assert_eq!(mid(p.patch(0, 2)), vec![6., 7., 8., 9., 9.]);
    }

    #[test]
    fn centre_patch_ring_comes_from_neighbours() {
        let parts: Vec<Tensor> = (0..9).map(|i| random_tensor(Shape::new(1, 4, 4, 4), 50 + i)).collect();
        let g = FeatureGrid::new(3, 3, parts.clone()).unwrap();
        let p = exchange_halos(&g, HaloSpec::new(1).unwrap()).unwrap();
        let whole = concat_spatial(3, 3, &parts).unwrap();
        // The padded centre patch is the 6x6 window around it in the assembled grid.
        assert_eq!(p.patch(1, 1), &view(&whole, Slice2D::new(3, 3, 6, 6)).unwrap());
    }

    #[test]
    fn halo_larger_than_patch_is_rejected() {
        let g = FeatureGrid::new(1, 2, vec![Tensor::zeros(Shape::new(1, 1, 2, 2)); 2]).unwrap();
        assert!(matches!(exchange_halos(&g, HaloSpec::new(3).unwrap()), Err(Error::Halo(_))));
    }

    #[test]
    fn narrow_cached_strip_is_rejected() {
        let mut g = FeatureGrid::new(1, 1, vec![Tensor::zeros(Shape::new(1, 1, 4, 4))]).unwrap();
        g.borders.left = Border::Cached(Tensor::zeros(Shape::new(1, 1, 4, 1)));
        assert!(matches!(exchange_halos(&g, HaloSpec::new(2).unwrap()), Err(Error::Halo(_))));
    }

    #[test]
    fn none_border_skips_padding() {
        let g = FeatureGrid::with_borders(
            1,
            2,
            vec![Tensor::zeros(Shape::new(1, 1, 4, 4)); 2],
            Borders::none(),
        )
        .unwrap();
        let p = exchange_halos(&g, HaloSpec::new(1).unwrap()).unwrap();
        assert_eq!(p.patch(0, 0).shape(), Shape::new(1, 1, 4, 5));
        assert_eq!(p.patch(0, 1).shape(), Shape::new(1, 1, 4, 5));
    }

    fn random_grid(rows: usize, cols: usize, hs: &[usize], ws: &[usize], seed: u64) -> Vec<Tensor> {
        let mut parts = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                parts.push(random_tensor(Shape::new(1, 2, hs[r], ws[c]), seed.wrapping_add((r * 31 + c) as u64)));
            }
        }
        parts
    }

    /// Cells `[r0.., c0..]` of `full`, padded with strips cut from the cells
    /// outside that window, must match the full-grid exchange.
    fn check_cached_restriction(rows: usize, cols: usize, r0: usize, c0: usize, h: usize, seed: u64) {
        let size = 2 * h + 1;
        let parts = random_grid(rows, cols, &vec![size; rows], &vec![size; cols], seed);
        let full = FeatureGrid::new(rows, cols, parts.clone()).unwrap();
        let spec = HaloSpec::new(h).unwrap();
        let reference = exchange_halos(&full, spec).unwrap();

        let sub_rows = rows - r0;
        let sub_cols = cols - c0;
        let sub: Vec<Tensor> = (r0..rows)
            .flat_map(|r| (c0..cols).map(move |c| (r, c)))
            .map(|(r, c)| parts[r * cols + c].clone())
            .collect();
        let mut borders = Borders::replicate();
        if c0 > 0 {
            let strips: Vec<Tensor> = (r0..rows)
                .map(|r| extract_strip(&parts[r * cols + c0 - 1], Side::Right, h).unwrap())
                .collect();
            borders.left = Border::Cached(concat_h(&strips).unwrap());
        }
        if r0 > 0 {
            // Bottom strips of the row above, with one cell of margin on each
            // side where it exists (replicated otherwise).
            let strip_of = |c: usize| extract_strip(&parts[(r0 - 1) * cols + c], Side::Bottom, h).unwrap();
            let mut pieces = Vec::new();
            if c0 > 0 {
                pieces.push(extract_strip(&strip_of(c0 - 1), Side::Right, h).unwrap());
            } else {
                pieces.push(pad_replicate(&extract_strip(&strip_of(c0), Side::Left, 1).unwrap(), h - 1, Sides::only(Side::Left)));
            }
            for c in c0..cols {
                pieces.push(strip_of(c));
            }
            let last = strip_of(cols - 1);
            pieces.push(pad_replicate(&extract_strip(&last, Side::Right, 1).unwrap(), h - 1, Sides::only(Side::Right)));
            borders.top = Border::Cached(concat_w(&pieces).unwrap());
        }
        let g = FeatureGrid::with_borders(sub_rows, sub_cols, sub, borders).unwrap();
        let got = exchange_halos(&g, spec).unwrap();
        for r in 0..sub_rows {
            for c in 0..sub_cols {
                assert_eq!(got.patch(r, c), reference.patch(r + r0, c + c0), "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn cached_strips_match_enlarged_grid() {
        check_cached_restriction(3, 4, 0, 1, 1, 7);
        check_cached_restriction(4, 3, 1, 0, 1, 8);
        check_cached_restriction(4, 4, 1, 1, 1, 9);
        check_cached_restriction(3, 3, 1, 2, 2, 10);
    }

    proptest! {
        #[test]
        fn local_padding_equals_single_pass(
            rows in 1usize..4, cols in 1usize..4,
            hs in prop::collection::vec(2usize..6, 3),
            ws in prop::collection::vec(2usize..6, 3),
            k in prop::sample::select(vec![1usize, 3, 5]),
            seed in any::<u64>(),
        ) {
            let halo = (k - 1) / 2;
            prop_assume!(hs.iter().chain(&ws).all(|&e| e >= halo));
            let parts = random_grid(rows, cols, &hs, &ws, seed);
            let w = random_tensor(Shape::new(3, 2, k, k), seed ^ 0xabc);
            let kernel = ConvKernel::new(w, vec![0.1, -0.2, 0.3]).unwrap();

            let g = FeatureGrid::new(rows, cols, parts.clone()).unwrap();
            let padded = if halo == 0 { g.clone() } else { exchange_halos(&g, HaloSpec::new(halo).unwrap()).unwrap() };
            let outs: Vec<Tensor> = padded.patches().iter().map(|p| conv2d_valid(p, &kernel, 1).unwrap()).collect();
            let tiled = concat_spatial(rows, cols, &outs).unwrap();

            let whole = concat_spatial(rows, cols, &parts).unwrap();
            let single = conv2d_valid(&pad_replicate(&whole, halo, Sides::ALL), &kernel, 1).unwrap();
            prop_assert_eq!(tiled, single);
        }

        #[test]
        fn zero_padding_breaks_the_identity(rows in 1usize..4, cols in 2usize..4, seed in any::<u64>()) {
            let parts = random_grid(rows, cols, &[4, 4, 4], &[4, 4, 4], seed);
            let kernel = ConvKernel::new(random_tensor(Shape::new(1, 2, 3, 3), seed ^ 1), vec![0.0]).unwrap();
            let outs: Vec<Tensor> = parts.iter().map(|p| conv2d_valid(&pad_zero(p, 1), &kernel, 1).unwrap()).collect();
            let tiled = concat_spatial(rows, cols, &outs).unwrap();
            let whole = concat_spatial(rows, cols, &parts).unwrap();
            let single = conv2d_valid(&pad_replicate(&whole, 1, Sides::ALL), &kernel, 1).unwrap();
            prop_assert!(max_abs_diff(&tiled, &single).unwrap() > 0.0);
        }
    }
}
