//! Distribution heads expressed as graph operations.
//!
//! Every density here reduces over the last (event) axis, so a `[batch, dim]`
//! parameter block yields one log-probability per batch row.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Bounds applied to every `log σ` before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian with clamped log standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mu: Var,
    pub log_sigma: Var,
}

impl DiagGaussian {
    pub fn new(g: &mut Graph, mu: Var, log_sigma: Var) -> Result<Self> {
        if g.shape(mu) != g.shape(log_sigma) {
            return Err(Error::shape("diag_gaussian", g.shape(mu), g.shape(log_sigma)));
        }
        let log_sigma = g.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        Ok(DiagGaussian { mu, log_sigma })
    }

    /// Splits a head output `[.., 2d]` into mean `[.., :d]` and log-std `[.., d:]`.
    pub fn from_packed(g: &mut Graph, raw: Var, dim: usize) -> Result<Self> {
        let width = g.shape(raw).last().copied().unwrap_or(0);
        if width != 2 * dim {
            return Err(Error::shape("diag_gaussian", g.shape(raw), &[2 * dim]));
        }
        let mu = g.slice(raw, 0, dim)?;
        let log_sigma = g.slice(raw, dim, dim)?;
        Self::new(g, mu, log_sigma)
    }

    /// Reparametrized draw `mu + sigma * eps`.
    pub fn rsample(&self, g: &mut Graph, eps: Var) -> Result<Var> {
        if g.shape(eps) != g.shape(self.mu) {
            return Err(Error::shape("rsample", g.shape(self.mu), g.shape(eps)));
        }
        let sigma = g.exp(self.log_sigma);
        let scaled = g.mul(sigma, eps)?;
        g.add(self.mu, scaled)
    }

    pub fn log_prob(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != g.shape(self.mu) {
            return Err(Error::shape("gaussian_log_prob", g.shape(self.mu), g.shape(x)));
        }
        let diff = g.sub(x, self.mu)?;
        let neg_ls = g.neg(self.log_sigma);
        let inv_sigma = g.exp(neg_ls);
        let z = g.mul(diff, inv_sigma)?;
        let z2 = g.mul(z, z)?;
        let half = g.scale(z2, -0.5);
        let el = g.sub(half, self.log_sigma)?;
        let el = g.add_scalar(el, -HALF_LN_2PI);
        g.sum_last(el)
    }

    /// Analytic `KL(self || p)`, summed over the event axis.
    pub fn kl(&self, g: &mut Graph, p: &DiagGaussian) -> Result<Var> {
        if g.shape(self.mu) != g.shape(p.mu) {
            return Err(Error::shape("kl_diag_gauss", g.shape(self.mu), g.shape(p.mu)));
        }
        // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
        let d = g.sub(self.log_sigma, p.log_sigma)?;
        let d2 = g.scale(d, 2.0);
        let var_ratio = g.exp(d2);
        let diff = g.sub(self.mu, p.mu)?;
        let diff2 = g.mul(diff, diff)?;
        let m2 = g.scale(p.log_sigma, -2.0);
        let inv_var_p = g.exp(m2);
        let mean_term = g.mul(diff2, inv_var_p)?;
        let inner = g.add(var_ratio, mean_term)?;
        let half = g.scale(inner, 0.5);
        let half = g.add_scalar(half, -0.5);
        let el = g.sub(half, d)?;
        g.sum_last(el)
    }
}

/// Convenience wrapper matching the free-function form used elsewhere.
pub fn kl_diag_gauss(g: &mut Graph, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    q.kl(g, p)
}

pub fn rsample(g: &mut Graph, d: &DiagGaussian, eps: Var) -> Result<Var> {
    d.rsample(g, eps)
}

/// Categorical over the last axis of `logits`.
#[derive(Clone, Copy, Debug)]
pub struct Categorical {
    pub logits: Var,
}

impl Categorical {
    pub fn log_prob(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        let shape = g.shape(self.logits).to_vec();
        if shape.len() != 2 || shape[0] != ids.len() {
            return Err(Error::shape("categorical_log_prob", &shape, &[ids.len()]));
        }
        let vocab = shape[1];
        let mut onehot = vec![0.0; ids.len() * vocab];
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::shape("categorical_log_prob", &shape, &[id]));
            }
            onehot[row * vocab + id] = 1.0;
        }
        let onehot = g.constant(shape, onehot)?;
        let lp = g.log_softmax(self.logits);
        let picked = g.mul(lp, onehot)?;
        g.sum_last(picked)
    }
}

/// Independent Bernoulli per element of `logits`.
#[derive(Clone, Copy, Debug)]
pub struct Bernoulli {
    pub logits: Var,
}

impl Bernoulli {
    /// `x` holds 0/1 values with the logits' shape.
    pub fn log_prob(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != g.shape(self.logits) {
            return Err(Error::shape("bernoulli_log_prob", g.shape(self.logits), g.shape(x)));
        }
        // x*l - softplus(l)
        let xl = g.mul(x, self.logits)?;
        let sp = g.softplus(self.logits);
        let el = g.sub(xl, sp)?;
        g.sum_last(el)
    }
}

/// Scalar Gaussian log-density, evaluated directly.
pub fn gaussian_log_density(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let ls = log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let z = (x - mu) * (-ls).exp();
    -0.5 * (2.0 * PI).ln() - ls - 0.5 * z * z
}
