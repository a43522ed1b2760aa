//! Closed-form diagonal-Gaussian quantities and the group-relative policy
//! optimization primitives, each in a plain-value form and a differentiable
//! form built on [`Graph`].

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{invalid, Error, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Rewards whose population standard deviation falls below this are treated
/// as a degenerate group and get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-6;

/// `N(mean, diag(std²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!("mean has {} dims, std has {}", mean.len(), std.len())));
        }
        if mean.is_empty() {
            return Err(invalid("gaussian needs at least one dimension"));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if let Some(s) = std.iter().find(|s| **s <= 0.0) {
            return Err(invalid(format!("standard deviation must be positive, got {s}")));
        }
        Ok(Self { mean, std })
    }

    /// Isotropic Gaussian with the same `std` in every dimension.
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![std; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

/// Per-dimension mean of the Gaussian log-density at `z`.
pub fn gaussian_logprob_normalized(z: &[f64], g: &DiagGaussian) -> Result<f64> {
    if z.len() != g.dim() {
        return Err(Error::Shape(format!("point has {} dims, gaussian {}", z.len(), g.dim())));
    }
    let total: f64 = z
        .iter()
        .zip(g.mean.iter().zip(&g.std))
        .map(|(x, (m, s))| -s.ln() - HALF_LN_2PI - (x - m) * (x - m) / (2.0 * s * s))
        .sum();
    Ok(total / z.len() as f64)
}

/// `KL(p ‖ q)` for diagonal Gaussians, summed over dimensions.
pub fn gaussian_kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("KL between {}-dim and {}-dim gaussians", p.dim(), q.dim())));
    }
    Ok(p.mean
        .iter()
        .zip(&p.std)
        .zip(q.mean.iter().zip(&q.std))
        .map(|((mp, sp), (mq, sq))| (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5)
        .sum())
}

/// Group-relative advantages: `(r − mean) / std` with the population standard
/// deviation; all zeros when the group is degenerate.
pub fn standardize_group(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid(format!("group needs at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `exp(clamp(lp_new − lp_old, −κ, κ))`.
pub fn clamp_exp_ratio(lp_new: f64, lp_old: f64, kappa: f64) -> Result<f64> {
    if !(lp_new.is_finite() && lp_old.is_finite() && kappa.is_finite()) {
        return Err(Error::NonFinite("log-probability ratio input".into()));
    }
    if kappa <= 0.0 {
        return Err(invalid(format!("clamp bound must be positive, got {kappa}")));
    }
    Ok((lp_new - lp_old).clamp(-kappa, kappa).exp())
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> Result<f64> {
    if !(rho.is_finite() && adv.is_finite() && eps.is_finite()) {
        return Err(Error::NonFinite("surrogate input".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("clip range must lie in (0, 1), got {eps}")));
    }
    Ok((rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv))
}

/// Differentiable [`gaussian_logprob_normalized`]; `z`, `mu`, `sigma` are
/// `1 × d` nodes.
pub fn logprob_normalized_var(g: &mut Graph, z: Var, mu: Var, sigma: Var) -> Var {
    let d = g.value(z).len() as f64;
    let diff = g.sub(z, mu);
    let ratio = g.div(diff, sigma);
    let sq = g.square(ratio);
    let quad = g.scale(sq, -0.5);
    let log_s = g.log(sigma);
    let terms = g.sub(quad, log_s);
    let total = g.sum(terms);
    let shifted = g.add_scalar(total, -HALF_LN_2PI * d);
    g.scale(shifted, 1.0 / d)
}

/// Differentiable [`gaussian_kl_diag`] of `N(mu_p, sigma_p²) ‖ N(mu_q, sigma_q²)`.
pub fn kl_diag_var(g: &mut Graph, mu_p: Var, sigma_p: Var, mu_q: Var, sigma_q: Var) -> Var {
    let log_q = g.log(sigma_q);
    let log_p = g.log(sigma_p);
    let log_ratio = g.sub(log_q, log_p);
    let var_p = g.square(sigma_p);
    let diff = g.sub(mu_p, mu_q);
    let diff2 = g.square(diff);
    let num = g.add(var_p, diff2);
    let var_q = g.square(sigma_q);
    let den = g.scale(var_q, 2.0);
    let frac = g.div(num, den);
    let terms = g.add(log_ratio, frac);
    let total = g.sum(terms);
    let d = g.value(mu_p).len() as f64;
    g.add_scalar(total, -0.5 * d)
}

/// Differentiable [`clamp_exp_ratio`]; `lp_old` is a stored constant.
pub fn clamp_exp_ratio_var(g: &mut Graph, lp_new: Var, lp_old: f64, kappa: f64) -> Var {
    let delta = g.add_scalar(lp_new, -lp_old);
    let clamped = g.clamp(delta, -kappa, kappa);
    g.exp(clamped)
}

/// Differentiable [`clipped_surrogate`] with a constant advantage.
pub fn clipped_surrogate_var(g: &mut Graph, rho: Var, adv: f64, eps: f64) -> Var {
    let unclipped = g.scale(rho, adv);
    let clipped = g.clamp(rho, 1.0 - eps, 1.0 + eps);
    let clipped = g.scale(clipped, adv);
    g.minimum(unclipped, clipped)
}

/// Row node filled with `value`, `1 × d`.
pub fn filled_row(g: &mut Graph, d: usize, value: f64) -> Var {
    g.constant(Tensor::filled(1, d, value))
}
