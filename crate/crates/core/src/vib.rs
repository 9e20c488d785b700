//! Variational information bottleneck mask.
//!
//! A [`VibGate`] multiplies an activation vector elementwise by
//! `z = μ + ε ⊙ σ`, `ε ~ N(0, I)`. The same layer type gates the four LSTM
//! gate outputs and the input feature vector. σ is kept positive by storing
//! `rho` with `σ = softplus(rho)`.
//!
//! With a zero-mean Gaussian prior whose variance is set to its optimum,
//! the KL term reduces to `Σⱼ log(1 + μⱼ²/σⱼ²)`, and units whose ratio
//! `αⱼ = μⱼ²/σⱼ²` falls under a threshold carry no information and may be
//! removed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, softplus_inv, SeededRng};

/// Default α threshold below which a unit is considered pruned.
pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// z = μ + ε ⊙ σ, used while training.
    Stochastic,
    /// z = μ, used for evaluation and inference.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibGate {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VibGate {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::dim("vib_gate", &[mu.len()], &[rho.len()]));
        }
        Ok(VibGate { mu, rho })
    }

    pub fn from_mu_sigma(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Self::new(mu, sigma.iter().map(|&s| softplus_inv(s)).collect())
    }

    /// Every unit at mean `mu` (jittered by `jitter · N(0,1)`) and scale `sigma`.
    pub fn init(n: usize, mu: f64, jitter: f64, sigma: f64, rng: &mut SeededRng) -> Self {
        let mean = (0..n).map(|_| mu + jitter * rng.normal()).collect();
        VibGate {
            mu: mean,
            rho: vec![softplus_inv(sigma); n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// dσ/dρ per unit.
    pub fn sigma_grad(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn sample_mask(&self, rng: &mut SeededRng, mode: MaskMode) -> Vec<f64> {
        match mode {
            MaskMode::Deterministic => self.mu.clone(),
            MaskMode::Stochastic => {
                let eps = rng.normals(self.len());
                self.mask_with_noise(&eps)
            }
        }
    }

    /// z = μ + ε ⊙ σ for a given noise vector.
    pub fn mask_with_noise(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((&m, &r), &e)| m + e * softplus(r))
            .collect()
    }

    pub fn kl_penalty(&self) -> f64 {
        self.mu
            .iter()
            .zip(self.sigma())
            .map(|(&m, s)| (m * m / (s * s)).ln_1p())
            .sum()
    }

    /// Gradient of [`kl_penalty`](Self::kl_penalty) with respect to (μ, ρ).
    pub fn kl_gradient(&self) -> (Vec<f64>, Vec<f64>) {
        let sigma = self.sigma();
        let dsig = self.sigma_grad();
        let mut dmu = Vec::with_capacity(self.len());
        let mut drho = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            let (m, s) = (self.mu[j], sigma[j]);
            let denom = m * m + s * s;
            dmu.push(2.0 * m / denom);
            drho.push(-2.0 * m * m / (s * denom) * dsig[j]);
        }
        (dmu, drho)
    }

    pub fn alpha_ratio(&self) -> Vec<f64> {
        self.mu
            .iter()
            .zip(self.sigma())
            .map(|(&m, s)| m * m / (s * s))
            .collect()
    }

    pub fn retained_indices(&self, threshold: f64) -> Vec<usize> {
        retained_by_alpha(&self.alpha_ratio(), threshold)
    }
}

/// Indices with α ≥ threshold, ascending.
pub fn retained_by_alpha(alpha: &[f64], threshold: f64) -> Vec<usize> {
    alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Exact KL(N(μ, σ²) ‖ N(0, ξ)) for one element.
pub fn gaussian_kl(mu: f64, sigma: f64, xi: f64) -> f64 {
    0.5 * ((xi / (sigma * sigma)).ln() + (sigma * sigma + mu * mu) / xi - 1.0)
}
