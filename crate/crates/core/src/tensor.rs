//! Dense row-major tensors.
//!
//! Tensors are generic over the scalar type so the same model code runs in
//! `f32` for training and in `f64` when gradients are checked numerically.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type usable in tensors and graphs.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    <T as Real>::from_f64(x)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| lit(x)).collect())
    }

    /// Entries drawn independently from `U(lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.gen_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Xavier/Glorot uniform initialization with explicit fan-in and fan-out.
    pub fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(shape, -limit, limit, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| lit::<U>(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, factor: T) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Rows `y0..y0+h` and columns `x0..x0+w` of every channel of a `C×H×W` map.
    pub fn crop_hw(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (c, hh, ww) = self.chw()?;
        if y0 + h > hh || x0 + w > ww || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "crop {h}x{w} at ({y0},{x0}) does not fit a {hh}x{ww} map"
            )));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in y0..y0 + h {
                let row = (ch * hh + y) * ww;
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(&[c, h, w], out)
    }

    /// Mirror a `C×H×W` map left-to-right.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (_, _, w) = self.chw()?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        Ok(out)
    }

    pub(crate) fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor::<f32>::new(&[1, 3, 3], (0..9).map(|x| x as f32).collect()).unwrap();
        let c = t.crop_hw(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let f = t.flip_horizontal().unwrap();
        assert_eq!(&f.data()[..3], &[2.0, 1.0, 0.0]);
        assert!(t.crop_hw(2, 2, 2, 2).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_vec(vec![0.1, -2.5, 3.0]);
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
