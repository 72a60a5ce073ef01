//! Stochastic optimizer used by the NMF and CSFA trainers: adaptive
//! first/second-moment estimation with optional Nesterov lookahead
//! (NADAM when on, Adam when off).
//!
//! Exact update order per step t (1-based), with gradient g and decay
//! rates β₁, β₂:
//!
//! ```text
//! m ← β₁ m + (1−β₁) g
//! v ← β₂ v + (1−β₂) g²
//! v̂ = v / (1 − β₂ᵗ)
//! Nesterov on:  u = β₁ · m/(1 − β₁ᵗ⁺¹) + (1−β₁) · g/(1 − β₁ᵗ)
//! Nesterov off: u = m/(1 − β₁ᵗ)
//! θ ← θ − step · u / (√v̂ + ε)
//! ```
//!
//! The lookahead bias correction uses the t+1 power for the momentum
//! term, which is what gives the Nesterov variant its one-step peek.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for the stochastic trainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Base step size (default 1e-3).
    pub step_size: f64,
    /// β₁, exponential decay of the first moment (default 0.9).
    pub first_moment_decay: f64,
    /// β₂, exponential decay of the second moment (default 0.999).
    pub second_moment_decay: f64,
    /// Nesterov lookahead on the first moment (default true).
    pub nesterov: bool,
    /// Total optimizer iterations (default 100_000).
    pub iterations: usize,
    /// Mini-batch size (default 256).
    pub batch_size: usize,
    /// Denominator stabilizer ε (default 1e-8).
    pub epsilon: f64,
    /// RNG seed for mini-batch sampling and parameter initialization.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            first_moment_decay: 0.9,
            second_moment_decay: 0.999,
            nesterov: true,
            iterations: 100_000,
            batch_size: 256,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Validates ranges: decays in (0,1), positive step/epsilon, counts ≥ 1.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !in_unit(self.first_moment_decay) || !in_unit(self.second_moment_decay) {
            return Err(Error::InvalidConfig(format!(
                "moment decays must lie in (0,1), got {} and {}",
                self.first_moment_decay, self.second_moment_decay
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Nadam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    step_size: f64,
    beta1: f64,
    beta2: f64,
    nesterov: bool,
    epsilon: f64,
}

impl Nadam {
    pub fn new(dim: usize, cfg: &OptimizerConfig) -> Self {
        Nadam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            step_size: cfg.step_size,
            beta1: cfg.first_moment_decay,
            beta2: cfg.second_moment_decay,
            nesterov: cfg.nesterov,
            epsilon: cfg.epsilon,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One in-place update of `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc1_next = 1.0 - self.beta1.powi(t + 1);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let v_hat = self.v[i] / bc2;
            let update = if self.nesterov {
                self.beta1 * self.m[i] / bc1_next + (1.0 - self.beta1) * g / bc1
            } else {
                self.m[i] / bc1
            };
            params[i] -= self.step_size * update / (v_hat.sqrt() + self.epsilon);
        }
    }
}
