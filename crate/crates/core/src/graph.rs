//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each recording method
//! evaluates its primitive immediately and appends a node; [`Graph::backward`]
//! then walks the nodes in reverse and accumulates cotangents. Nodes that do
//! not depend on any parameter are never differentiated.

use crate::error::{Error, Result};
use crate::ops::{self, Binary, Conv2dSpec, Unary};
use crate::tensor::{lit, Real, Tensor};
use crate::transform;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Slice { input: Var, start: usize },
    AddBias(Var, Var),
    Conv2d { input: Var, kernels: Var, spec: Conv2dSpec },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Grid { params: Var, h: usize, w: usize },
    Bilinear { feature: Var, grid: Var },
    MaxOver { inputs: Vec<Var>, argmax: Vec<usize> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    /// Hash of every discrete branch taken (relu sides, argmaxes, sample
    /// cells), when tracking is enabled.
    signature: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            signature: None,
        }
    }

    /// A graph that also hashes its piecewise branch decisions. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn tracking_branches() -> Self {
        Self {
            nodes: Vec::new(),
            signature: Some(FNV_OFFSET),
        }
    }

    pub fn signature(&self) -> Option<u64> {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mix(&mut self, word: u64) {
        if let Some(h) = self.signature.as_mut() {
            for b in word.to_le_bytes() {
                *h ^= b as u64;
                *h = h.wrapping_mul(FNV_PRIME);
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose cotangent is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(op, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let out = ops::unary(op, self.value(x));
        if self.signature.is_some() && matches!(op, Unary::Relu | Unary::Abs) {
            let words: Vec<u64> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| (v > T::zero()) as u64 | (((v < T::zero()) as u64) << 1))
                .collect();
            words.into_iter().for_each(|w| self.mix(w));
        }
        self.push(out, Op::Unary(op, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = ops::scale(self.value(x), factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = lit::<T>(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Contiguous run `start..start+len` of the flattened tensor, as rank 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.len() || len == 0 {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for shape {:?}",
                start + len,
                src.shape()
            )));
        }
        let out = Tensor::from_vec(src.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice { input: x, start }, &[x]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernels), spec)?;
        Ok(self.push(out, Op::Conv2d { input, kernels, spec }, &[input, kernels]))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), window, stride)?;
        if self.signature.is_some() {
            argmax.iter().for_each(|&a| self.mix(a as u64));
        }
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Sampling grid of size `h×w` from `[s_x, s_y, t_x, t_y]`.
    pub fn grid(&mut self, params: Var, h: usize, w: usize) -> Result<Var> {
        let out = transform::scale_translate_grid(self.value(params), h, w)?;
        Ok(self.push(out, Op::Grid { params, h, w }, &[params]))
    }

    pub fn bilinear(&mut self, feature: Var, grid: Var) -> Result<Var> {
        let out = transform::bilinear_sample(self.value(feature), self.value(grid))?;
        if self.signature.is_some() {
            let cells: Vec<(isize, isize)> =
                transform::sample_cells(self.value(feature).shape(), self.value(grid)).collect();
            for (x, y) in cells {
                self.mix(x as u64);
                self.mix(y as u64);
            }
        }
        Ok(self.push(out, Op::Bilinear { feature, grid }, &[feature, grid]))
    }

    /// Element-wise maximum across same-shaped nodes; ties go to the first.
    pub fn max_over(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let (out, argmax) = ops::max_over(&values)?;
        if self.signature.is_some() {
            argmax.iter().for_each(|&a| self.mix(a as u64));
        }
        Ok(self.push(
            out,
            Op::MaxOver {
                inputs: inputs.to_vec(),
                argmax,
            },
            inputs,
        ))
    }

    /// Back-propagates from `output`. One-element outputs default to a unit
    /// seed; anything larger needs an explicit cotangent.
    pub fn backward(&self, output: Var, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        let out_value = self.value(output);
        let seed = match seed {
            Some(s) if s.shape() == out_value.shape() => s,
            Some(s) => {
                return Err(Error::dim(format!(
                    "seed shape {:?} does not match output {:?}",
                    s.shape(),
                    out_value.shape()
                )))
            }
            None if out_value.len() == 1 => Tensor::full(out_value.shape(), T::one()),
            None => {
                return Err(Error::dim(format!(
                    "output {:?} is not scalar; a seed cotangent is required",
                    out_value.shape()
                )))
            }
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(a), self.value(b), g)?;
                acc(a, ga);
                acc(b, gb);
            }
            &Op::Binary(op, a, b) => {
                let (ga, gb) = ops::binary_backward(op, self.value(a), self.value(b), g);
                acc(a, ga);
                acc(b, gb);
            }
            &Op::Unary(op, x) => {
                acc(x, ops::unary_backward(op, self.value(x), &node.value, g));
            }
            &Op::Scale(x, f) => acc(x, ops::scale(g, f)),
            &Op::AddScalar(x) => acc(x, g.clone()),
            &Op::Softmax(x) => acc(x, ops::softmax_backward(&node.value, g)),
            &Op::Sum(x) => acc(x, Tensor::full(self.value(x).shape(), g.data()[0])),
            &Op::Reshape(x) => acc(x, g.reshape(self.value(x).shape())?),
            &Op::Slice { input, start } => {
                let mut gx = Tensor::zeros(self.value(input).shape());
                gx.data_mut()[start..start + g.len()].copy_from_slice(g.data());
                acc(input, gx);
            }
            &Op::AddBias(x, b) => {
                acc(x, g.clone());
                if needs(b) {
                    acc(b, ops::add_bias_backward(self.value(x).shape(), g));
                }
            }
            &Op::Conv2d { input, kernels, spec } => {
                let (gx, gk) =
                    ops::conv2d_backward(self.value(input), self.value(kernels), spec, g, needs(input))?;
                if let Some(gx) = gx {
                    acc(input, gx);
                }
                acc(kernels, gk);
            }
            Op::MaxPool2d { input, argmax } => {
                acc(*input, ops::maxpool2d_backward(self.value(*input).shape(), argmax, g));
            }
            &Op::Grid { params, h, w } => {
                acc(params, transform::scale_translate_grid_backward(g, h, w));
            }
            &Op::Bilinear { feature, grid } => {
                let (gf, gg) = transform::bilinear_sample_backward(self.value(feature), self.value(grid), g)?;
                acc(feature, gf);
                acc(grid, gg);
            }
            Op::MaxOver { inputs, argmax } => {
                for (k, &v) in inputs.iter().enumerate() {
                    if !needs(v) {
                        continue;
                    }
                    let data = g
                        .data()
                        .iter()
                        .zip(argmax)
                        .map(|(&gv, &a)| if a == k { gv } else { T::zero() })
                        .collect();
                    acc(v, Tensor::new(g.shape(), data)?);
                }
            }
        }
        Ok(())
    }
}

/// Cotangents produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not influence the output or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Cotangent of `v`, or zeros shaped like `like` when `v` was unreached.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_node() {
        // y = sum(x * x) so dy/dx = 2x.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let prod = g.mul(c, p).unwrap();
        let y = g.sum(prod);
        let grads = g.backward(y, None).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_output_needs_seed() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(g.backward(y, None).is_err());
        assert!(g.backward(y, Some(Tensor::from_vec(vec![1.0]))).is_err());
        assert!(g.backward(y, Some(Tensor::from_vec(vec![1.0, 1.0]))).is_ok());
    }

    #[test]
    fn signature_tracks_relu_side() {
        let run = |v: f64| {
            let mut g = Graph::<f64>::tracking_branches();
            let x = g.param(Tensor::from_vec(vec![v]));
            g.relu(x);
            g.signature().unwrap()
        };
        assert_eq!(run(0.3), run(0.7));
        assert_ne!(run(0.3), run(-0.3));
        assert!(Graph::<f64>::new().signature().is_none());
    }
}
