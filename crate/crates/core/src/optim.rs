//! Adam with bias correction.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("optimizer expects {expected} parameters, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update. `params` and `grads` are aligned with the order the
    /// state was created in. The whole step is rejected, leaving parameters and
    /// moments untouched, if any gradient element is not finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[&Tensor]) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Arity {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(g: f64, lr: f64) -> f64 {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_lr(lr), [&p]);
        st.step(&mut [("x", &mut p)], &[&Tensor::scalar(g)]).unwrap();
        p.item()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [1e-3, 0.5, 7.0, 1e4] {
            assert!((one_step(g, 0.1) + 0.1).abs() < 1e-6, "g={g}");
            assert!((one_step(-g, 0.1) - 0.1).abs() < 1e-6, "g={g}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 3.5]).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        let z = Tensor::zeros(&[3]);
        for _ in 0..10 {
            st.step(&mut [("p", &mut p)], &[&z]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn nan_gradient_rejected_with_name() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        let err = st.step(&mut [("head.weight", &mut p)], &[&g]).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient {
                name: "head.weight".into(),
                index: 1
            }
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn second_moment_non_negative() {
        let mut p = Tensor::zeros(&[4]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        for k in 0..5 {
            let g = Tensor::from_fn(&[4], |i| (i as f64 - 1.5) * (k as f64 + 1.0));
            st.step(&mut [("p", &mut p)], &[&g]).unwrap();
        }
        assert!(st.v[0].data().iter().all(|&x| x >= 0.0));
    }
}
