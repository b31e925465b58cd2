//! AdamW with decoupled weight decay.
//!
//! Per step, for parameter `w` with gradient `g`:
//!
//! ```text
//! w <- w * (1 - lr * wd)
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::array::{Array, Scalar};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    config: AdamWConfig,
    step: u64,
    first: Vec<Array<T>>,
    second: Vec<Array<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Array<T>>) -> Self {
        let first: Vec<Array<T>> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` pairs a parameter name (used in error
    /// messages) with its array; `grads[i]` must have the same shape.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Array<T>)],
        grads: &[&Array<T>],
    ) -> Result<(), NumericsError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericsError::Layout(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    param: (*name).to_string(),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let eps = T::of(c.eps);

        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w = *w * decay;
                m[j] = b1 * m[j] + one_b1 * gr;
                v[j] = b2 * v[j] + one_b2 * gr * gr;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: AdamWConfig, w0: Vec<f32>, grad: Vec<f32>, steps: usize) -> Vec<f32> {
        let mut w = Array::from_vec(&[w0.len()], w0).unwrap();
        let g = Array::from_vec(&[grad.len()], grad).unwrap();
        let mut opt = AdamW::new(config, [&w]);
        for _ in 0..steps {
            opt.step(&mut [("w", &mut w)], &[&g]).unwrap();
        }
        w.into_data()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_weights() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(run(cfg, vec![0.5, -2.0], vec![0.0, 0.0], 3), vec![0.5, -2.0]);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let w = run(AdamWConfig::default(), vec![1.0, -4.0], vec![0.0, 0.0], 1);
        assert_eq!(w, vec![1.0 * (1.0 - 1e-5f32), -4.0 * (1.0 - 1e-5f32)]);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut w = Array::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        let mut prev = f32::INFINITY;
        for _ in 0..100 {
            let x = w.item();
            let loss = x * x;
            assert!(loss < prev, "loss {loss} did not drop below {prev}");
            prev = loss;
            let g = Array::from_vec(&[1], vec![2.0 * x]).unwrap();
            opt.step(&mut [("w", &mut w)], &[&g]).unwrap();
        }
        assert_eq!(opt.step_count(), 100);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = Array::<f32>::zeros(&[2]);
        let g = Array::from_vec(&[2], vec![0.0, f32::NAN]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        let err = opt.step(&mut [("layers.0.wq", &mut w)], &[&g]).unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_inputs_are_bit_identical() {
        let a = run(AdamWConfig::default(), vec![0.3, 0.7, -0.1], vec![0.2, -1.5, 3.0], 10);
        let b = run(AdamWConfig::default(), vec![0.3, 0.7, -0.1], vec![0.2, -1.5, 3.0], 10);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
