//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::config(format!(
                "adam_step got {} parameters, {} gradients and {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::config(format!(
                    "parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update with learning rate `lr`. Moments are kept
/// in `T`; the update is computed in `f64`.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    state.check(params, grads)?;
    let AdamConfig { beta1, beta2, eps, .. } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.as_f64();
            let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
            let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
            m[j] = lit(mj);
            v[j] = lit(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = lit(w.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::<f32>::from_vec(vec![0.3, -1.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut s, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_matches_hand_oracle() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let g = 0.2;
        let mut p = Tensor::<f64>::from_vec(vec![1.0]);
        let mut s = AdamState::new(AdamConfig::default(), &[&p]);
        adam_step(&mut [&mut p], &[Tensor::from_vec(vec![g])], &mut s, 1e-3).unwrap();
        let want = 1.0 - 1e-3 * g / (g + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);

        // Second step with the same gradient, stepped by hand.
        let m2: f64 = 0.9 * 0.1 * g + 0.1 * g;
        let v2: f64 = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let want2 = want - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        adam_step(&mut [&mut p], &[Tensor::from_vec(vec![g])], &mut s, 1e-3).unwrap();
        assert!((p.data()[0] - want2).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut a = Tensor::<f32>::from_vec(vec![0.5, 0.5]);
        let mut s = AdamState::new(AdamConfig::default(), &[&a]);
        for k in 0..10 {
            let g = Tensor::from_vec(vec![0.1 * k as f32 - 0.3; 2]);
            adam_step(&mut [&mut a], &[g], &mut s, 1e-2).unwrap();
            assert_eq!(a.data()[0], a.data()[1]);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut s = AdamState::new(AdamConfig::default(), &[&p]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
