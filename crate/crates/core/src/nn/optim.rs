use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

/// Optimizer and loop settings. Defaults follow the selection-head training
/// table: Adam, learning rate 0.01, batches of 500, 10 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 500,
            epochs: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {}", self.eps)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter, then zero the
/// gradients. Fails before touching any value if a gradient is not finite.
pub fn adam_step(store: &mut ParamStore, cfg: &OptimConfig) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let grad = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, &g) in m.iter_mut().zip(grad) {
            *mi = (b1 * *mi as f64 + (1.0 - b1) * g as f64) as f32;
        }
        let v = p.adam_v.data_mut();
        for (vi, &g) in v.iter_mut().zip(grad) {
            *vi = (b2 * *vi as f64 + (1.0 - b2) * (g as f64) * (g as f64)) as f32;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi as f64 / c1;
            let vhat = vi as f64 / c2;
            *w -= (cfg.learning_rate as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![0.5, -2.0]));
        adam_step(&mut s, &OptimConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -2.0]);
    }

    #[test]
    fn matches_hand_evaluated_update() {
        // Second step from m = 0.1, v = 0.002, step_count = 1, grad 0.3
        let cfg = OptimConfig::default();
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(1.0));
        {
            let p = s.get_mut(id);
            p.adam_m = Tensor::scalar(0.1);
            p.adam_v = Tensor::scalar(0.002);
            p.step_count = 1;
            p.grad = Tensor::scalar(0.3);
        }
        adam_step(&mut s, &cfg).unwrap();
        let m = 0.9 * 0.1 + 0.1 * 0.3;
        let v = 0.999 * 0.002 + 0.001 * 0.09;
        let mhat = m / (1.0 - 0.9f64.powi(2));
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let expected = 1.0 - 0.01 * mhat / (vhat.sqrt() + 1e-8);
        assert!((s.value(id).data()[0] as f64 - expected).abs() < 1e-6);
        assert_eq!(s.get(id).grad.data(), &[0.0]);
        assert_eq!(s.get(id).step_count, 2);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_vec(vec![0.3, 0.1]));
        let b = s.add("b", Tensor::from_vec(vec![0.3, 0.1]));
        for _ in 0..5 {
            s.get_mut(a).grad = Tensor::from_vec(vec![0.2, -0.7]);
            s.get_mut(b).grad = Tensor::from_vec(vec![0.2, -0.7]);
            adam_step(&mut s, &OptimConfig::default()).unwrap();
        }
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut s = ParamStore::new();
        let id = s.add("bad", Tensor::scalar(1.0));
        s.get_mut(id).grad = Tensor::scalar(f32::NAN);
        let err = adam_step(&mut s, &OptimConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bad"));
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
