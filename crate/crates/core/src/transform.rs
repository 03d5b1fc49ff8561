//! Constrained spatial transformer: scale-and-translate sampling grids and
//! bilinear sampling with analytic gradients.
//!
//! Coordinates are normalized to `[-1, 1]` with the align-corners convention:
//! `-1` and `+1` land on the centers of the first and last pixels, so the
//! identity transform with matching output size reproduces its input.

use crate::error::Result;
use crate::tensor::{lit, Real, Tensor};

/// Scale and translation of a crop-only affine transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    pub s_x: f64,
    pub s_y: f64,
    pub t_x: f64,
    pub t_y: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        s_x: 1.0,
        s_y: 1.0,
        t_x: 0.0,
        t_y: 0.0,
    };

    pub fn new(s_x: f64, s_y: f64, t_x: f64, t_y: f64) -> Self {
        Self { s_x, s_y, t_x, t_y }
    }

    /// Parameters ordered `(s_x, s_y, t_x, t_y)`.
    pub fn to_array(self) -> [f64; 4] {
        [self.s_x, self.s_y, self.t_x, self.t_y]
    }

    pub fn from_slice<T: Real>(v: &[T]) -> Self {
        Self::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64(), v[3].as_f64())
    }

    pub fn to_tensor<T: Real>(self) -> Tensor<T> {
        Tensor::from_vec(self.to_array().iter().map(|&x| lit(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.t_x, self.t_y)
    }
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// `[[s_x, 0, t_x], [0, s_y, t_y]]`; rotation and shear terms are always zero.
pub fn build_matrix(p: TransformParams) -> [[f64; 3]; 2] {
    [[p.s_x, 0.0, p.t_x], [0.0, p.s_y, p.t_y]]
}

/// Normalized target coordinate of index `i` along an axis of length `n`.
#[inline]
pub fn target_coord<T: Real>(i: usize, n: usize) -> T {
    if n == 1 {
        T::zero()
    } else {
        lit::<T>(-1.0) + lit::<T>(2.0) * lit::<T>(i as f64) / lit::<T>((n - 1) as f64)
    }
}

/// Source coordinates for an `h×w` output. Stored as a `h×w×2` tensor with
/// `(x_s, y_s)` in the last dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<T: Real = f32> {
    coords: Tensor<T>,
}

impl<T: Real> SamplingGrid<T> {
    pub fn from_tensor(coords: Tensor<T>) -> Result<Self> {
        match *coords.shape() {
            [_, _, 2] => Ok(Self { coords }),
            _ => Err(crate::Error::dim(format!(
                "sampling grid must be h×w×2, got {:?}",
                coords.shape()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// `(x_s, y_s)` at output cell `(i, j)`.
    pub fn source(&self, i: usize, j: usize) -> (T, T) {
        let k = (i * self.width() + j) * 2;
        (self.coords.data()[k], self.coords.data()[k + 1])
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.coords
    }
}

/// Grid for a full 2×3 matrix. Used for inspection; the differentiable path
/// goes through [`scale_translate_grid`].
pub fn affine_grid<T: Real>(m: [[f64; 3]; 2], h: usize, w: usize) -> SamplingGrid<T> {
    assert!(h >= 1 && w >= 1, "grid size must be positive");
    let m: [[T; 3]; 2] = m.map(|row| row.map(lit));
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yt = target_coord::<T>(i, h);
        for j in 0..w {
            let xt = target_coord::<T>(j, w);
            data.push(m[0][0] * xt + m[0][1] * yt + m[0][2]);
            data.push(m[1][0] * xt + m[1][1] * yt + m[1][2]);
        }
    }
    SamplingGrid {
        coords: Tensor::new(&[h, w, 2], data).expect("grid shape"),
    }
}

/// Grid from a `[s_x, s_y, t_x, t_y]` parameter tensor.
pub fn scale_translate_grid<T: Real>(params: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if params.len() != 4 {
        return Err(crate::Error::dim(format!(
            "transform parameters must have 4 entries, got shape {:?}",
            params.shape()
        )));
    }
    if h == 0 || w == 0 {
        return Err(crate::Error::config("region size must be at least 1×1"));
    }
    let p = params.data();
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yt = target_coord::<T>(i, h);
        for j in 0..w {
            let xt = target_coord::<T>(j, w);
            data.push(p[0] * xt + p[2]);
            data.push(p[1] * yt + p[3]);
        }
    }
    Tensor::new(&[h, w, 2], data)
}

pub fn scale_translate_grid_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let g = grad.data();
    let mut out = [T::zero(); 4];
    for i in 0..h {
        let yt = target_coord::<T>(i, h);
        for j in 0..w {
            let xt = target_coord::<T>(j, w);
            let k = (i * w + j) * 2;
            out[0] += g[k] * xt;
            out[2] += g[k];
            out[1] += g[k + 1] * yt;
            out[3] += g[k + 1];
        }
    }
    Tensor::from_vec(out.to_vec())
}

/// Pixel-space position of a normalized coordinate on an axis of `n` pixels.
/// Positions within a few ulps of a pixel center snap onto it, so the identity
/// grid reads pixels exactly despite the rounding in its normalized coordinates.
#[inline]
fn to_pixel<T: Real>(c: T, n: usize) -> T {
    let u = (c + T::one()) / lit(2.0) * lit((n - 1) as f64);
    let r = u.round();
    if (u - r).abs() <= lit::<T>(8.0) * T::epsilon() * r.abs().max(T::one()) {
        r
    } else {
        u
    }
}

struct Corners<T> {
    x0: isize,
    y0: isize,
    wx: T,
    wy: T,
}

#[inline]
fn corners<T: Real>(xs: T, ys: T, h: usize, w: usize) -> Corners<T> {
    let u = to_pixel(xs, w);
    let v = to_pixel(ys, h);
    let fu = u.floor();
    let fv = v.floor();
    // Far-out samples clamp to a sentinel cell that is entirely padding.
    let clamp = |f: T, n: usize| -> isize {
        let f = f.as_f64();
        if f < -2.0 {
            -2
        } else if f > n as f64 + 1.0 {
            n as isize + 1
        } else {
            f as isize
        }
    };
    Corners {
        x0: clamp(fu, w),
        y0: clamp(fv, h),
        wx: u - fu,
        wy: v - fv,
    }
}

/// Bilinear sampling with zero padding. `feature` is `D×H×W`, `grid` is
/// `h×w×2`; the output is `D×h×w`.
pub fn bilinear_sample<T: Real>(feature: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, h, w) = feature.chw()?;
    let [gh, gw, 2] = *grid.shape() else {
        return Err(crate::Error::dim(format!(
            "sampling grid must be h×w×2, got {:?}",
            grid.shape()
        )));
    };
    let f = feature.data();
    let g = grid.data();
    let cells = gh * gw;
    let mut out = vec![T::zero(); d * cells];
    let fetch = |ch: usize, y: isize, x: isize| -> T {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            T::zero()
        } else {
            f[(ch * h + y as usize) * w + x as usize]
        }
    };
    for cell in 0..cells {
        let c = corners(g[2 * cell], g[2 * cell + 1], h, w);
        let (one, wx, wy) = (T::one(), c.wx, c.wy);
        for ch in 0..d {
            let v00 = fetch(ch, c.y0, c.x0);
            let v01 = fetch(ch, c.y0, c.x0 + 1);
            let v10 = fetch(ch, c.y0 + 1, c.x0);
            let v11 = fetch(ch, c.y0 + 1, c.x0 + 1);
            out[ch * cells + cell] = (one - wy) * ((one - wx) * v00 + wx * v01) + wy * ((one - wx) * v10 + wx * v11);
        }
    }
    Tensor::new(&[d, gh, gw], out)
}

/// Cotangents of [`bilinear_sample`] with respect to the feature map and the
/// grid coordinates.
pub fn bilinear_sample_backward<T: Real>(
    feature: &Tensor<T>,
    grid: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, h, w) = feature.chw()?;
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let cells = gh * gw;
    let f = feature.data();
    let g = grid.data();
    let go = grad.data();
    let mut gf = vec![T::zero(); f.len()];
    let mut gg = vec![T::zero(); g.len()];
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
    let idx = |ch: usize, y: isize, x: isize| (ch * h + y as usize) * w + x as usize;
    let du_dx: T = lit::<T>((w - 1) as f64) / lit(2.0);
    let dv_dy: T = lit::<T>((h - 1) as f64) / lit(2.0);
    for cell in 0..cells {
        let c = corners(g[2 * cell], g[2 * cell + 1], h, w);
        let (one, wx, wy) = (T::one(), c.wx, c.wy);
        let taps = [
            (c.y0, c.x0, (one - wy) * (one - wx), -(one - wy), -(one - wx)),
            (c.y0, c.x0 + 1, (one - wy) * wx, one - wy, -wx),
            (c.y0 + 1, c.x0, wy * (one - wx), -wy, one - wx),
            (c.y0 + 1, c.x0 + 1, wy * wx, wy, wx),
        ];
        let mut du = T::zero();
        let mut dv = T::zero();
        for ch in 0..d {
            let gv = go[ch * cells + cell];
            for &(y, x, weight, dw_du, dw_dv) in &taps {
                if inside(y, x) {
                    let k = idx(ch, y, x);
                    gf[k] += gv * weight;
                    du += gv * f[k] * dw_du;
                    dv += gv * f[k] * dw_dv;
                }
            }
        }
        gg[2 * cell] = du * du_dx;
        gg[2 * cell + 1] = dv * dv_dy;
    }
    Ok((Tensor::new(feature.shape(), gf)?, Tensor::new(grid.shape(), gg)?))
}

/// Integer cell of every sample, used to detect when a perturbation moves a
/// sample across a pixel boundary.
pub(crate) fn sample_cells<'a, T: Real>(feature_shape: &[usize], grid: &'a Tensor<T>) -> impl Iterator<Item = (isize, isize)> + 'a {
    let (h, w) = (feature_shape[1], feature_shape[2]);
    grid.data().chunks(2).map(move |p| {
        let c = corners(p[0], p[1], h, w);
        (c.x0, c.y0)
    })
}

/// `st(f, p)`: sample an `h×w` region of `feature` selected by `p`.
pub fn st<T: Real>(feature: &Tensor<T>, p: TransformParams, h: usize, w: usize) -> Result<Tensor<T>> {
    let grid = scale_translate_grid(&p.to_tensor::<T>(), h, w)?;
    bilinear_sample(feature, &grid)
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// Image-space box covered by a region, clipped to the image.
pub fn region_box(p: TransformParams, img_w: f64, img_h: f64) -> PixelRect {
    let cx = (p.t_x + 1.0) / 2.0 * img_w;
    let cy = (p.t_y + 1.0) / 2.0 * img_h;
    let hw = p.s_x.abs() * img_w / 2.0;
    let hh = p.s_y.abs() * img_h / 2.0;
    let clip = |v: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
    PixelRect {
        x0: clip(cx - hw, img_w),
        y0: clip(cy - hh, img_h),
        x1: clip(cx + hw, img_w),
        y1: clip(cy + hh, img_h),
    }
}
