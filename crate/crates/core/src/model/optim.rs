//! Adam with bias correction over the flat parameter vector.

use super::{non_finite_error, ModelError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct OptimizerState {
    pub lr: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, n_params: usize) -> OptimizerState {
        OptimizerState { lr, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One Adam step. Moments are f64; parameters round back to f32 storage.
    pub fn apply(&mut self, params: &mut [f32], grads: &[f64]) -> Result<(), ModelError> {
        assert_eq!(params.len(), self.m.len(), "moments shape-matched to parameters");
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(non_finite_error("gradient", params));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let delta = self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            params[i] = (params[i] as f64 - delta) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = OptimizerState::new(0.01, 4);
        let mut params = vec![1.0f32, -2.0, 0.5, 3.0];
        let before = params.clone();
        opt.apply(&mut params, &[0.0; 4]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut opt = OptimizerState::new(0.01, 2);
        let mut params = vec![1.0f32, 2.0];
        let err = opt.apply(&mut params, &[f64::NAN, 0.0]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn quadratic_toy_converges() {
        // f(x) = sum (x - target)^2, analytic gradient.
        let target = [0.3f64, -1.2, 2.0];
        let mut params = vec![5.0f32, 5.0, 5.0];
        let mut opt = OptimizerState::new(0.05, 3);
        for _ in 0..500 {
            let grads: Vec<f64> = params
                .iter()
                .zip(&target)
                .map(|(&p, &t)| 2.0 * (p as f64 - t))
                .collect();
            opt.apply(&mut params, &grads).unwrap();
        }
        for (p, t) in params.iter().zip(&target) {
            assert!((*p as f64 - t).abs() < 1e-2, "{p} vs {t}");
        }
    }
}
