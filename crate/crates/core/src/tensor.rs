//! Dense rank-4 `f32` tensors in NCHW layout.
//!
//! Everything in the engine (latents, feature maps, weights, images) is a
//! [`Tensor`]. Spatial helpers ([`view`], [`concat_spatial`]) always copy;
//! there is no aliasing between tensors.

use std::fmt;

use crate::error::{Error, Result};

/// Tensor shape as `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor, `w` fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({})", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(format!(
                "{} needs {} values, got {}",
                shape,
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The contiguous `h*w` plane of image `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ensure_same_shape(self, other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn view(&self, s: Slice2D) -> Result<Tensor> {
        view(self, s)
    }
}

/// Spatial sub-window, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slice2D {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Slice2D {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Slice2D { top, left, height, width }
    }

    pub fn full(shape: Shape) -> Self {
        Slice2D::new(0, 0, shape.h, shape.w)
    }

    /// The slice `inner`, expressed relative to this slice, mapped back into
    /// the coordinates of the source this slice was taken from.
    pub fn compose(&self, inner: Slice2D) -> Slice2D {
        Slice2D::new(self.top + inner.top, self.left + inner.left, inner.height, inner.width)
    }
}

/// Copies the spatial window `s` of `t` across all images and channels.
pub fn view(t: &Tensor, s: Slice2D) -> Result<Tensor> {
    let shape = t.shape;
    if s.height == 0 || s.width == 0 || s.top + s.height > shape.h || s.left + s.width > shape.w {
        return Err(Error::Bounds(format!("slice {s:?} outside {shape}")));
    }
    let out_shape = Shape::new(shape.n, shape.c, s.height, s.width);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..shape.n {
        for c in 0..shape.c {
            let plane = t.plane(n, c);
            for y in s.top..s.top + s.height {
                let row = y * shape.w;
                data.extend_from_slice(&plane[row + s.left..row + s.left + s.width]);
            }
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Assembles a `rows x cols` grid of tensors (row-major in `parts`) into one
/// tensor. Parts in a row must share `h`, parts in a column must share `w`.
pub fn concat_spatial(rows: usize, cols: usize, parts: &[Tensor]) -> Result<Tensor> {
    if rows == 0 || cols == 0 || parts.len() != rows * cols {
        return Err(Error::shape(format!(
            "grid {rows}x{cols} needs {} parts, got {}",
            rows * cols,
            parts.len()
        )));
    }
    let first = parts[0].shape;
    let heights: Vec<usize> = (0..rows).map(|r| parts[r * cols].shape.h).collect();
    let widths: Vec<usize> = (0..cols).map(|c| parts[c].shape.w).collect();
    for r in 0..rows {
        for c in 0..cols {
            let s = parts[r * cols + c].shape;
            if s.n != first.n || s.c != first.c || s.h != heights[r] || s.w != widths[c] {
                return Err(Error::shape(format!(
                    "part ({r},{c}) is {s}, expected {}x{}x{}x{}",
                    first.n, first.c, heights[r], widths[c]
                )));
            }
        }
    }
    let total_h: usize = heights.iter().sum();
    let total_w: usize = widths.iter().sum();
    let out_shape = Shape::new(first.n, first.c, total_h, total_w);
    let mut out = Tensor::zeros(out_shape);
    let mut y0 = 0;
    for r in 0..rows {
        let mut x0 = 0;
        for c in 0..cols {
            let part = &parts[r * cols + c];
            let ps = part.shape;
            for n in 0..ps.n {
                for ch in 0..ps.c {
                    let src = part.plane(n, ch);
                    let dst = out.plane_mut(n, ch);
                    for y in 0..ps.h {
                        let d = (y0 + y) * total_w + x0;
                        dst[d..d + ps.w].copy_from_slice(&src[y * ps.w..(y + 1) * ps.w]);
                    }
                }
            }
            x0 += widths[c];
        }
        y0 += heights[r];
    }
    Ok(out)
}

/// Side-by-side concatenation of equally tall tensors.
pub fn concat_w(parts: &[Tensor]) -> Result<Tensor> {
    concat_spatial(1, parts.len(), parts)
}

/// Top-to-bottom concatenation of equally wide tensors.
pub fn concat_h(parts: &[Tensor]) -> Result<Tensor> {
    concat_spatial(parts.len(), 1, parts)
}

/// Concatenates along the channel axis; all parts share `n`, `h` and `w`.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("no parts to concatenate"))?.shape;
    let mut c_total = 0;
    for p in parts {
        let s = p.shape;
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(format!("channel concat of {s} with {first}")));
        }
        c_total += s.c;
    }
    let shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..first.n {
        for p in parts {
            for c in 0..p.shape.c {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    ensure_same_shape(a, b, "max_abs_diff")?;
    Ok(a.data.iter().zip(&b.data).fold(0.0f32, |m, (x, y)| m.max((x - y).abs())))
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{what}: {} vs {}", a.shape, b.shape)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::from_vec(Shape::new(1, 1, h, w), rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
    }

    #[test]
    fn view_picks_window() {
        let t = t2(&[&[1., 2., 3.], &[4., 5., 6.], &[7., 8., 9.]]);
        let v = view(&t, Slice2D::new(1, 1, 2, 2)).unwrap();
        assert_eq!(v, t2(&[&[5., 6.], &[8., 9.]]));
        assert_eq!(view(&t, Slice2D::full(t.shape())).unwrap(), t);
    }

    #[test]
    fn view_matches_loop() {
        let t = random_tensor(Shape::new(1, 2, 5, 5), 3);
        let v = view(&t, Slice2D::new(0, 3, 5, 2)).unwrap();
        assert_eq!(v.shape(), Shape::new(1, 2, 5, 2));
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..2 {
                    assert_eq!(v.at(0, c, y, x), t.at(0, c, y, x + 3));
                }
            }
        }
    }

    #[test]
    fn view_out_of_bounds() {
        let t = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(view(&t, Slice2D::new(2, 0, 2, 1)), Err(Error::Bounds(_))));
        assert!(matches!(view(&t, Slice2D::new(0, 0, 0, 1)), Err(Error::Bounds(_))));
    }

    #[test]
    fn concat_pair() {
        let a = t2(&[&[1., 2.], &[3., 4.]]);
        let b = t2(&[&[5., 6.], &[7., 8.]]);
        let c = concat_spatial(1, 2, &[a.clone(), b]).unwrap();
        assert_eq!(c, t2(&[&[1., 2., 5., 6.], &[3., 4., 7., 8.]]));
        assert_eq!(concat_spatial(1, 1, &[a.clone()]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(concat_spatial(1, 2, &[a.clone(), b.clone()]), Err(Error::Shape(_))));
        let c = Tensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(matches!(concat_spatial(2, 1, &[a, c]), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_3x3_roundtrip() {
        let parts: Vec<Tensor> =
            (0..9).map(|i| random_tensor(Shape::new(1, 3, 4, 4), 100 + i)).collect();
        let whole = concat_spatial(3, 3, &parts).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let v = view(&whole, Slice2D::new(4 * r, 4 * c, 4, 4)).unwrap();
                assert_eq!(v, parts[r * 3 + c]);
            }
        }
    }

    #[test]
    fn max_abs_diff_cases() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert_eq!(max_abs_diff(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(0, 0, 1, 0, 0.5);
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.5);

        let x = random_tensor(Shape::new(2, 3, 4, 5), 1);
        let y = random_tensor(Shape::new(2, 3, 4, 5), 2);
        let mut expected = 0.0f32;
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        let d = (x.at(n, c, i, j) - y.at(n, c, i, j)).abs();
                        if d > expected {
                            expected = d;
                        }
                    }
                }
            }
        }
        assert_eq!(max_abs_diff(&x, &y).unwrap(), expected);
        let z = Tensor::zeros(Shape::new(1, 1, 2, 3));
        assert!(max_abs_diff(&a, &z).is_err());
    }

    proptest! {
        #[test]
        fn concat_then_view_recovers_parts(
            rows in 1usize..=4,
            cols in 1usize..=4,
            hs in prop::collection::vec(1usize..=5, 4),
            ws in prop::collection::vec(1usize..=5, 4),
            seed in any::<u64>(),
        ) {
            let mut parts = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    parts.push(random_tensor(Shape::new(1, 2, hs[r], ws[c]), seed ^ (r * 7 + c) as u64));
                }
            }
            let whole = concat_spatial(rows, cols, &parts).unwrap();
            let mut y0 = 0;
            for r in 0..rows {
                let mut x0 = 0;
                for c in 0..cols {
                    let v = view(&whole, Slice2D::new(y0, x0, hs[r], ws[c])).unwrap();
                    prop_assert_eq!(&v, &parts[r * cols + c]);
                    x0 += ws[c];
                }
                y0 += hs[r];
            }
        }

        #[test]
        fn view_composition(
            h in 4usize..10, w in 4usize..10,
            a in (0usize..3, 0usize..3), b in (0usize..2, 0usize..2),
            seed in any::<u64>(),
        ) {
            let t = random_tensor(Shape::new(1, 2, h, w), seed);
            let outer = Slice2D::new(a.0, a.1, h - a.0, w - a.1);
            let inner = Slice2D::new(b.0, b.1, h - a.0 - b.0, w - a.1 - b.1);
            let twice = view(&view(&t, outer).unwrap(), inner).unwrap();
            let once = view(&t, outer.compose(inner)).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
