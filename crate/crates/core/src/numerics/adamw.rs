use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

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
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates and step count for AdamW.
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: ParamSet<T>,
    second: ParamSet<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update of `params` in place.
    ///
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).map_err(|_| Error::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !self.first.contains(name) {
                return Err(Error::UnknownParam(name.to_string()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let eps = T::of(c.eps);

        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.first.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.second.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = self.first.get(name)?.data();
            let v = self.second.get(name)?.data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *pi = *pi * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters.
pub fn adamw_step<T: Scalar>(
    params: &ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimState<T>,
) -> Result<ParamSet<T>> {
    let mut out = params.clone();
    state.step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::from_f64(&[3], &[0.3, -1.7, 2.5]).unwrap());
        let mut g = ParamSet::<f32>::new();
        g.insert("w", Tensor::from_f64(&[3], &[1.0, 2.0, -3.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut state = OptimState::new(&p, cfg);
        let out = adamw_step(&p, &g, &mut state).unwrap();
        assert_eq!(out, p);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t=1: m̂ = g, v̂ = g², update = g/(|g| + ε) ≈ sign(g)
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let p = single(1.0);
        let mut state = OptimState::new(&p, cfg);
        let out = adamw_step(&p, &single(1.0), &mut state).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((out.get("p").unwrap().item() - expected).abs() < 1e-15);
        assert!((out.get("p").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let p = single(2.0);
        let mut state = OptimState::new(&p, cfg);
        let out = adamw_step(&p, &single(0.0), &mut state).unwrap();
        assert!((out.get("p").unwrap().item() - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_named() {
        let p = single(1.0);
        let mut state = OptimState::new(&p, AdamWConfig::default());
        let err = adamw_step(&p, &ParamSet::new(), &mut state).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "p"));
        assert_eq!(state.step_count(), 0);
    }
}
