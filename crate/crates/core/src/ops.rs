//! Forward and vector-Jacobian kernels for the dense primitives.
//!
//! Each primitive comes as a pair: `foo` computes the output and
//! `foo_backward` maps an output cotangent to input cotangents. The graph in
//! [`crate::graph`] records calls and dispatches to these kernels.

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Rows, inner and column counts for `a × b`. A rank-1 `b` is treated as a
/// column and the result stays rank-1.
fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, Vec<usize>)> {
    let mismatch = || {
        Error::dim(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        ))
    };
    let [m, k] = *a.shape() else {
        return Err(mismatch());
    };
    match *b.shape() {
        [kb, n] if kb == k => Ok((m, k, n, vec![m, n])),
        [kb] if kb == k => Ok((m, k, 1, vec![m])),
        _ => Err(mismatch()),
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n, shape) = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    if n == 1 {
        let out = ad.chunks_exact(k).map(|row| dot(row, bd)).collect();
        return Tensor::new(&shape, out);
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bpj) in dst.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Returns `(∂a, ∂b)` for `c = a × b` given `∂c`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n, _) = matmul_dims(a, b)?;
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    if n == 1 {
        for ((&g, row), garow) in gd.iter().zip(ad.chunks_exact(k)).zip(ga.chunks_exact_mut(k)) {
            if g == T::zero() {
                continue;
            }
            for ((dst, &bv), (gbv, &av)) in garow.iter_mut().zip(bd).zip(gb.iter_mut().zip(row)) {
                *dst = g * bv;
                *gbv += g * av;
            }
        }
        return Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?));
    }
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            ga[i * k + p] = acc;
            let aip = ad[i * k + p];
            for (dst, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *dst += aip * g;
            }
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

pub fn binary<T: Real>(op: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(&format!("{op:?}"), a, b)?;
    let f = |x: T, y: T| match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn binary_backward<T: Real>(
    op: Binary,
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    match op {
        Binary::Add => (grad.clone(), grad.clone()),
        Binary::Sub => (grad.clone(), grad.map(|g| -g)),
        Binary::Mul => {
            let ga = grad.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
            let gb = grad.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
            (
                Tensor::new(a.shape(), ga).expect("shape preserved"),
                Tensor::new(b.shape(), gb).expect("shape preserved"),
            )
        }
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn unary<T: Real>(op: Unary, x: &Tensor<T>) -> Tensor<T> {
    match op {
        Unary::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Unary::Sigmoid => x.map(sigmoid_scalar),
        Unary::Tanh => x.map(|v| v.tanh()),
        Unary::Abs => x.map(|v| v.abs()),
    }
}

/// Cotangent of a unary op. `y` is the forward output; kinks take subgradient 0.
pub fn unary_backward<T: Real>(op: Unary, x: &Tensor<T>, y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let zero = T::zero();
    let one = T::one();
    let data = grad
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&g, (&xv, &yv))| match op {
            Unary::Relu => {
                if xv > zero {
                    g
                } else {
                    zero
                }
            }
            Unary::Sigmoid => g * yv * (one - yv),
            Unary::Tanh => g * (one - yv * yv),
            Unary::Abs => {
                if xv > zero {
                    g
                } else if xv < zero {
                    -g
                } else {
                    zero
                }
            }
        })
        .collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

/// Softmax over all entries, computed with max-subtraction.
pub fn softmax<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let max = s.data().iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = s.data().iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::new(s.shape(), exps.into_iter().map(|e| e / total).collect()).expect("shape preserved")
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let dot: T = y.data().iter().zip(grad.data()).map(|(&p, &g)| p * g).sum();
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| p * (g - dot))
        .collect();
    Tensor::new(y.shape(), data).expect("shape preserved")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, spec: Conv2dSpec) -> Result<ConvDims> {
    let (c_in, h, w) = input.chw()?;
    let [c_out, kc, kh, kw] = *kernels.shape() else {
        return Err(Error::dim(format!(
            "conv2d: kernels must be C_out×C_in×kH×kW, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d: input {:?} has {c_in} channels but kernels {:?} expect {kc}",
            input.shape(),
            kernels.shape()
        )));
    }
    if spec.stride == 0 {
        return Err(Error::dim("conv2d: stride must be positive"));
    }
    let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
    if kh > ph || kw > pw {
        return Err(Error::dim(format!(
            "conv2d: kernel {kh}×{kw} larger than padded input {ph}×{pw} (input {:?})",
            input.shape()
        )));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh: (ph - kh) / spec.stride + 1,
        ow: (pw - kw) / spec.stride + 1,
    })
}

/// Valid kernel offsets `k` with `0 <= o*stride + k - pad < size`.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, size: usize) -> (usize, usize) {
    let base = o * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min((size + pad).saturating_sub(base));
    (lo, hi.max(lo))
}

/// Unrolls the padded input into a `(c_in·kh·kw) × (oh·ow)` matrix; padded
/// taps are zero.
fn im2col<T: Real>(x: &[T], d: &ConvDims, spec: Conv2dSpec) -> Vec<T> {
    let cells = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.c_in * d.kh * d.kw * cells];
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * cells;
                for oy in 0..d.oh {
                    let (ky0, ky1) = tap_range(oy, spec.stride, spec.padding, d.kh, d.h);
                    if ky < ky0 || ky >= ky1 {
                        continue;
                    }
                    let iy = oy * spec.stride + ky - spec.padding;
                    for ox in 0..d.ow {
                        let (kx0, kx1) = tap_range(ox, spec.stride, spec.padding, d.kw, d.w);
                        if kx >= kx0 && kx < kx1 {
                            let ix = ox * spec.stride + kx - spec.padding;
                            cols[row + oy * d.ow + ox] = x[(c * d.h + iy) * d.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Cross-correlation with zero padding. Each output channel accumulates the
/// unrolled input rows in `(c_in, ky, kx)` order.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, spec)?;
    let cols = im2col(input.data(), &d, spec);
    let (cells, taps) = (d.oh * d.ow, d.c_in * d.kh * d.kw);
    let k = kernels.data();
    let mut out = vec![T::zero(); d.c_out * cells];
    for (o, dst) in out.chunks_exact_mut(cells).enumerate() {
        for (r, src) in cols.chunks_exact(cells).enumerate() {
            let kv = k[o * taps + r];
            if kv == T::zero() {
                continue;
            }
            for (acc, &v) in dst.iter_mut().zip(src) {
                *acc += kv * v;
            }
        }
    }
    Tensor::new(&[d.c_out, d.oh, d.ow], out)
}

/// Returns `(∂input, ∂kernels)`. The input cotangent is skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: Conv2dSpec,
    grad: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let d = conv_dims(input, kernels, spec)?;
    let (cells, taps) = (d.oh * d.ow, d.c_in * d.kh * d.kw);
    if grad.len() != d.c_out * cells {
        return Err(Error::dim(format!(
            "conv2d backward: cotangent {:?} does not match output [{}, {}, {}]",
            grad.shape(),
            d.c_out,
            d.oh,
            d.ow
        )));
    }
    let cols = im2col(input.data(), &d, spec);
    let (k, g) = (kernels.data(), grad.data());
    let mut gk = vec![T::zero(); k.len()];
    for (o, grow) in g.chunks_exact(cells).enumerate() {
        for (r, src) in cols.chunks_exact(cells).enumerate() {
            gk[o * taps + r] = grow.iter().zip(src).map(|(&a, &b)| a * b).sum();
        }
    }
    let gx = if need_input {
        let mut gcols = vec![T::zero(); taps * cells];
        for (o, grow) in g.chunks_exact(cells).enumerate() {
            for (r, dst) in gcols.chunks_exact_mut(cells).enumerate() {
                let kv = k[o * taps + r];
                if kv == T::zero() {
                    continue;
                }
                for (acc, &gv) in dst.iter_mut().zip(grow) {
                    *acc += kv * gv;
                }
            }
        }
        let mut gx = vec![T::zero(); input.len()];
        for c in 0..d.c_in {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let row = ((c * d.kh + ky) * d.kw + kx) * cells;
                    for oy in 0..d.oh {
                        let (ky0, ky1) = tap_range(oy, spec.stride, spec.padding, d.kh, d.h);
                        if ky < ky0 || ky >= ky1 {
                            continue;
                        }
                        let iy = oy * spec.stride + ky - spec.padding;
                        for ox in 0..d.ow {
                            let (kx0, kx1) = tap_range(ox, spec.stride, spec.padding, d.kw, d.w);
                            if kx >= kx0 && kx < kx1 {
                                let ix = ox * spec.stride + kx - spec.padding;
                                gx[(c * d.h + iy) * d.w + ix] += gcols[row + oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(input.shape(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(kernels.shape(), gk)?))
}

/// Max pooling. Returns the output and, per output cell, the flat input index
/// of the first (row-major) maximum in its window.
pub fn maxpool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::dim("maxpool2d: window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::dim(format!(
            "maxpool2d: window {window} exceeds input {:?}",
            input.shape()
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        data[idx] += g;
    }
    gx
}

/// Adds `bias[c]` to every element of channel `c` (leading dimension).
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    if bias.shape() != [c] {
        return Err(Error::dim(format!(
            "add_bias: bias {:?} does not match leading dimension of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let per = x.len() / c;
    let mut out = x.clone();
    for (chunk, &b) in out.data_mut().chunks_mut(per).zip(bias.data()) {
        for v in chunk {
            *v += b;
        }
    }
    Ok(out)
}

pub fn add_bias_backward<T: Real>(x_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let c = x_shape[0];
    let per = grad.len() / c;
    Tensor::from_vec(grad.data().chunks(per).map(|ch| ch.iter().copied().sum()).collect())
}

/// Element-wise maximum across same-shaped tensors; also returns, per entry,
/// the index of the first tensor attaining the maximum.
pub fn max_over<T: Real>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Protocol("max over an empty list".into()))?;
    for t in inputs {
        same_shape("max_over", first, t)?;
    }
    let mut out = first.data().to_vec();
    let mut arg = vec![0usize; out.len()];
    for (k, t) in inputs.iter().enumerate().skip(1) {
        for (i, &v) in t.data().iter().enumerate() {
            if v > out[i] {
                out[i] = v;
                arg[i] = k;
            }
        }
    }
    Ok((Tensor::new(first.shape(), out)?, arg))
}

pub fn scale<T: Real>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = lit::<T>(factor);
    x.map(|v| v * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 2], &[0.0; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_definitions() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(unary(Unary::Relu, &x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(unary(Unary::Sigmoid, &t(&[1], &[0.0])).data(), &[0.5]);
        assert!(binary(Binary::Add, &x, &t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(-1000.0f32), 0.0);
        assert_eq!(sigmoid_scalar(1000.0f32), 1.0);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).data(), &[0.5, 0.5]);
        assert_eq!(softmax(&t(&[2], &[1000.0, 1000.0])).data(), &[0.5, 0.5]);
        let p = softmax(&t(&[3], &[1.0, 2.0, 3.0]));
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_closed_forms() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), scale(&x, 2.0).data());

        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        assert_eq!(conv2d(&x, &k, Conv2dSpec::default()).unwrap().data(), &[10.0]);
    }

    #[test]
    fn conv_padding_shape_and_errors() {
        let x = Tensor::<f64>::zeros(&[2, 5, 5]);
        let k = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        let big = Tensor::<f64>::zeros(&[1, 2, 7, 7]);
        assert!(conv2d(&x, &big, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().0.data(), &[4.0]);
        let c = Tensor::<f64>::full(&[1, 4, 4], 3.0);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool2d_backward(c.shape(), &arg, &Tensor::full(&[1, 2, 2], 1.0));
        assert_eq!(g.sum(), 4.0);
        assert_eq!(g.data()[0], 1.0);
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn max_over_first_wins() {
        let a = t(&[2], &[0.1, 0.9]);
        let b = t(&[2], &[0.4, 0.2]);
        let (m, arg) = max_over(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[0.4, 0.9]);
        assert_eq!(arg, vec![1, 0]);
        let (_, arg) = max_over(&[&a, &a]).unwrap();
        assert_eq!(arg, vec![0, 0]);
        assert!(max_over::<f64>(&[]).is_err());
    }
}
