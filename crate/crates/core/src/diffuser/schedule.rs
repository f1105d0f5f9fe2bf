use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

/// Linear β schedule over iterations `1..=T`; index `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t < 2 {
            return Err(Error::Config("a schedule needs at least 2 steps".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {} < {} < 1",
                cfg.beta_start, cfg.beta_end
            )));
        }
        // Rounded through f32 so a schedule rebuilt from a checkpoint is identical.
        let betas = (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .map(|b| b as f32 as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_iter(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("iteration {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_iter(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Coefficients `(c_x0, c_eps, σ)` of the reverse step from `t` written
    /// in terms of the predicted clean image and noise. `eta = 1` is the
    /// ancestral posterior, `eta = 0` the deterministic update.
    pub fn reverse_step(&self, t: usize, eta: f64) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let var = eta * eta * (1.0 - ab_prev) / (1.0 - ab) * self.beta(t);
        (ab_prev.sqrt(), (1.0 - ab_prev - var).max(0.0).sqrt(), var.sqrt())
    }

    /// Coefficients `(c_x0, c_z, σ)` of the reverse posterior at step `t`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_z = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c_x0, c_z, var.sqrt())
    }
}
