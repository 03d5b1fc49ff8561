//! Central finite-difference verification of analytic gradients.
//!
//! Checks always run in `f64`. The output is reduced to a scalar with a fixed
//! random projection so every output entry contributes. Entries whose
//! difference stencil would cross a branch of a piecewise op (a relu kink, a
//! max-pool winner change, a bilinear cell boundary) are counted as skipped
//! rather than compared, since the difference quotient is meaningless there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Default perturbation for central differences.
pub const PERTURBATION: f64 = 1e-4;
/// Default acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// A function with a hand-written vector-Jacobian product.
pub trait DifferentiableOp<T: Real> {
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;

    /// Cotangents for every input given the output cotangent.
    fn backward(&self, inputs: &[Tensor<T>], cotangent: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Hash of the piecewise branches taken at `inputs`, if the op has any.
    fn branch_signature(&self, _inputs: &[Tensor<T>]) -> Result<Option<u64>> {
        Ok(None)
    }

    /// Output and branch signature together; override when one pass yields both.
    fn forward_traced(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Option<u64>)> {
        Ok((self.forward(inputs)?, self.branch_signature(inputs)?))
    }
}

type BuildFn<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'a;

/// Adapts a graph-building closure into a [`DifferentiableOp`]; every input
/// is bound as a parameter.
pub struct GraphOp<'a, T: Real> {
    build: Box<BuildFn<'a, T>>,
}

impl<'a, T: Real> GraphOp<'a, T> {
    pub fn new(build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'a) -> Self {
        Self { build: Box::new(build) }
    }

    fn run(&self, mut g: Graph<T>, inputs: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    }
}

impl<T: Real> DifferentiableOp<T> for GraphOp<'_, T> {
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (g, _, out) = self.run(Graph::new(), inputs)?;
        Ok(g.value(out).clone())
    }

    fn backward(&self, inputs: &[Tensor<T>], cotangent: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (g, vars, out) = self.run(Graph::new(), inputs)?;
        let mut grads = g.backward(out, Some(cotangent.clone()))?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect())
    }

    fn branch_signature(&self, inputs: &[Tensor<T>]) -> Result<Option<u64>> {
        let (g, _, _) = self.run(Graph::tracking_branches(), inputs)?;
        Ok(g.signature())
    }

    fn forward_traced(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Option<u64>)> {
        let (g, _, out) = self.run(Graph::tracking_branches(), inputs)?;
        Ok((g.value(out).clone(), g.signature()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub perturbation: f64,
    /// Seed for the output projection.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            perturbation: PERTURBATION,
            seed: 0x6a0d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, entry)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_at_branches: usize,
}

impl GradCheckReport {
    /// Passes when every compared entry is within `tol` and at most 5% of
    /// entries straddled a branch.
    pub fn passes(&self, tol: f64) -> bool {
        let total = self.checked + self.skipped_at_branches;
        self.checked > 0 && self.max_rel_error <= tol && self.skipped_at_branches * 20 <= total
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `op.backward` against central differences of `op.forward` at
/// `inputs` and returns the largest relative error over all input entries.
pub fn grad_check(op: &dyn DifferentiableOp<f64>, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport> {
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total == 0 {
        return Err(Error::Protocol("grad_check needs at least one input entry".into()));
    }
    let out = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let projection: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cotangent = Tensor::new(out.shape(), projection.clone())?;
    let analytic = op.backward(inputs, &cotangent)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Protocol(format!(
            "backward returned {} cotangents for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let base_sig = op.branch_signature(inputs)?;

    let project = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(&projection).map(|(a, b)| a * b).sum() };
    let h = opts.perturbation;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_at_branches: 0,
    };
    for i in 0..inputs.len() {
        if analytic[i].shape() != inputs[i].shape() {
            return Err(Error::dim(format!(
                "cotangent {i} has shape {:?}, input has {:?}",
                analytic[i].shape(),
                inputs[i].shape()
            )));
        }
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let (plus, sig_plus) = op.forward_traced(&work)?;
            work[i].data_mut()[j] = x - h;
            let (minus, sig_minus) = op.forward_traced(&work)?;
            let (plus, minus) = (project(&plus), project(&minus));
            work[i].data_mut()[j] = x;

            if base_sig.is_some() && (sig_plus != base_sig || sig_minus != base_sig) {
                report.skipped_at_branches += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Triple;

    impl DifferentiableOp<f64> for Triple {
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].map(|x| 3.0 * x))
        }

        fn backward(&self, _inputs: &[Tensor<f64>], cot: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![cot.map(|g| 3.0 * g)])
        }
    }

    /// Correct forward, backward scaled by two.
    struct Doubled<O>(O);

    impl<O: DifferentiableOp<f64>> DifferentiableOp<f64> for Doubled<O> {
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.0.forward(inputs)
        }

        fn backward(&self, inputs: &[Tensor<f64>], cot: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(self.0.backward(inputs, cot)?.into_iter().map(|t| t.map(|g| 2.0 * g)).collect())
        }
    }

    fn input() -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.01])]
    }

    #[test]
    fn linear_map_is_exact() {
        let r = grad_check(&Triple, &input(), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_backward_is_detected() {
        let r = grad_check(&Doubled(Triple), &input(), GradCheckOptions::default()).unwrap();
        // |2a - a| / |2a| = 0.5 for every entry.
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
        assert!(!r.passes(TOLERANCE));
    }

    #[test]
    fn straddled_kinks_are_skipped() {
        let op = GraphOp::new(|g, v| Ok(g.relu(v[0])));
        let x = vec![Tensor::from_vec(vec![0.5, 5e-5, -0.5])];
        let r = grad_check(&op, &x, GradCheckOptions::default()).unwrap();
        assert_eq!(r.skipped_at_branches, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }
}
