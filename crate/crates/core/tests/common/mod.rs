//! Independent 64-bit reimplementations used as test oracles.
#![allow(dead_code)]

use zforce::data::{DataKind, Observation};
use zforce::params::F64Params;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub struct Named<'a>(pub &'a F64Params);

impl Named<'_> {
    pub fn get(&self, name: &str) -> &[f64] {
        let i = self.0.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.0.values[i]
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        let i = self.0.names.iter().position(|n| n == name).unwrap();
        &self.0.shapes[i]
    }
}

/// Row vector times a row-major `[x.len(), cols]` matrix.
pub fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    assert_eq!(w.len(), x.len() * cols);
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar LSTM gate equations, gate order (i, f, g, o).
pub fn lstm(p: &Named, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let wi = p.get(&format!("{prefix}.w_input"));
    let wh = p.get(&format!("{prefix}.w_hidden"));
    let b = p.get(&format!("{prefix}.bias"));
    let a = vecmat(x, wi, 4 * n);
    let r = vecmat(h, wh, 4 * n);
    let mut h_new = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    for k in 0..n {
        let pre = |gate: usize| a[gate * n + k] + r[gate * n + k] + b[gate * n + k];
        let i = sigmoid(pre(0));
        let f = sigmoid(pre(1));
        let g = pre(2).tanh();
        let o = sigmoid(pre(3));
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

pub fn head(p: &Named, role: &str, x: &[f64]) -> Vec<f64> {
    let b1 = p.get(&format!("{role}.b1"));
    let b2 = p.get(&format!("{role}.b2"));
    let hidden = b1.len();
    let a: Vec<f64> = vecmat(x, p.get(&format!("{role}.w1")), hidden)
        .iter()
        .zip(b1)
        .map(|(v, b)| {
            let v = v + b;
            let v = if v >= 0.0 { v } else { v / 3.0 };
            v.clamp(-3.0, 3.0)
        })
        .collect();
    vecmat(&a, p.get(&format!("{role}.w2")), b2.len())
        .iter()
        .zip(b2)
        .map(|(v, b)| v + b)
        .collect()
}

pub fn log_normal(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let ls = log_sigma.clamp(-8.0, 8.0);
    let s = ls.exp();
    -HALF_LN_2PI - ls - 0.5 * ((x - mu) / s).powi(2)
}

/// Sum of per-dimension densities; `packed` holds means then log-sigmas.
pub fn log_normal_packed(x: &[f64], packed: &[f64]) -> f64 {
    let d = x.len();
    (0..d).map(|k| log_normal(x[k], packed[k], packed[d + k])).sum()
}

pub fn kl_packed(q: &[f64], p: &[f64]) -> f64 {
    let d = q.len() / 2;
    (0..d)
        .map(|k| {
            let (mq, lq) = (q[k], q[d + k].clamp(-8.0, 8.0));
            let (mp, lp) = (p[k], p[d + k].clamp(-8.0, 8.0));
            let (vq, vp) = ((2.0 * lq).exp(), (2.0 * lp).exp());
            lp - lq + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
    pub bwd: f64,
    /// `rec + log prior(z) - log posterior(z)`
    pub log_w: f64,
}

pub struct Oracle<'a> {
    pub p: Named<'a>,
    pub kind: DataKind,
    pub z_dim: usize,
}

impl<'a> Oracle<'a> {
    pub fn new(params: &'a F64Params, kind: DataKind, z_dim: usize) -> Self {
        Oracle {
            p: Named(params),
            kind,
            z_dim,
        }
    }

    fn input(&self, dir: &str, o: &Observation) -> Vec<f64> {
        match o {
            Observation::Frame(f) => f.iter().map(|&v| v as f64).collect(),
            Observation::Id(i) => match self.kind {
                DataKind::Tokens => {
                    let e = self.p.get(&format!("{dir}.embed"));
                    let d = self.p.shape(&format!("{dir}.embed"))[1];
                    e[*i as usize * d..(*i as usize + 1) * d].to_vec()
                }
                _ => vec![*i as f64],
            },
        }
    }

    pub fn obs_log_prob(&self, raw: &[f64], o: &Observation) -> f64 {
        match o {
            Observation::Frame(f) => {
                let x: Vec<f64> = f.iter().map(|&v| v as f64).collect();
                log_normal_packed(&x, raw)
            }
            Observation::Id(i) => match self.kind {
                DataKind::Tokens => {
                    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + raw.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    raw[*i as usize] - lse
                }
                _ => *i as f64 * raw[0] - softplus(raw[0]),
            },
        }
    }

    /// Backward states `b[0..n]`: `b[n-1]` is the initial state.
    pub fn backward_states(&self, seq: &[Observation]) -> Vec<Vec<f64>> {
        let n = seq.len();
        let mut b = vec![self.p.get("backward.h0").to_vec(); n];
        let mut c = self.p.get("backward.c0").to_vec();
        for t in (0..n.saturating_sub(1)).rev() {
            let x = self.input("backward", &seq[t + 1]);
            let (h, cn) = lstm(&self.p, "backward.lstm", &x, &b[t + 1], &c);
            b[t] = h;
            c = cn;
        }
        b
    }

    /// All loss terms for one sequence; `eps[s]` is the posterior noise of step `s`.
    pub fn sequence(&self, seq: &[Observation], eps: &[Vec<f64>]) -> Terms {
        let b = self.backward_states(seq);
        let mut h = self.p.get("forward.h0").to_vec();
        let mut c = self.p.get("forward.c0").to_vec();
        let mut t = Terms::default();
        for s in 0..seq.len().saturating_sub(1) {
            let prior = head(&self.p, "prior", &h);
            let q_in: Vec<f64> = h.iter().chain(&b[s]).copied().collect();
            let post = head(&self.p, "posterior", &q_in);
            let zd = self.z_dim;
            let z: Vec<f64> = (0..zd)
                .map(|k| post[k] + post[zd + k].clamp(-8.0, 8.0).exp() * eps[s][k])
                .collect();
            let x_in: Vec<f64> = self.input("forward", &seq[s]).into_iter().chain(z.iter().copied()).collect();
            (h, c) = lstm(&self.p, "forward.lstm", &x_in, &h, &c);
            let out = head(&self.p, "output", &h);
            let rec = self.obs_log_prob(&out, &seq[s + 1]);
            t.rec += rec;
            t.kl += kl_packed(&post, &prior);
            t.log_w += rec + log_normal_packed(&z, &prior) - log_normal_packed(&z, &post);
            t.aux += log_normal_packed(&b[s], &head(&self.p, "auxiliary", &z));
            if !(self.kind == DataKind::Tokens && s == 0) {
                t.bwd += self.obs_log_prob(&head(&self.p, "backward_output", &b[s]), &seq[s]);
            }
        }
        t
    }

    /// `log p(x[1] | x[0], z)` for a one-step sequence and an explicit latent.
    pub fn one_step_log_lik(&self, seq: &[Observation], z: &[f64]) -> f64 {
        let h = self.p.get("forward.h0");
        let c = self.p.get("forward.c0");
        let x_in: Vec<f64> = self.input("forward", &seq[0]).into_iter().chain(z.iter().copied()).collect();
        let (h, _) = lstm(&self.p, "forward.lstm", &x_in, h, c);
        self.obs_log_prob(&head(&self.p, "output", &h), &seq[1])
    }

    /// Prior and posterior (packed mean / log-sigma) of the single step.
    pub fn one_step_latents(&self, seq: &[Observation]) -> (Vec<f64>, Vec<f64>) {
        let b = self.backward_states(seq);
        let h = self.p.get("forward.h0");
        let prior = head(&self.p, "prior", h);
        let q_in: Vec<f64> = h.iter().chain(&b[0]).copied().collect();
        (prior, head(&self.p, "posterior", &q_in))
    }
}

/// Gauss-Hermite nodes and weights for `int exp(-x^2) f(x) dx`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.166_67),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `log E_{z ~ N(mu, sigma^2)} exp(f(z))` by Gauss-Hermite quadrature.
pub fn log_expect_exp(mu: f64, sigma: f64, nodes: &(Vec<f64>, Vec<f64>), f: impl Fn(f64) -> f64) -> f64 {
    let terms: Vec<f64> = nodes
        .0
        .iter()
        .zip(&nodes.1)
        .map(|(t, w)| w.ln() - 0.5 * std::f64::consts::PI.ln() + f(mu + std::f64::consts::SQRT_2 * sigma * t))
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `E_{z ~ N(mu, sigma^2)} f(z)` by Gauss-Hermite quadrature.
pub fn expect(mu: f64, sigma: f64, nodes: &(Vec<f64>, Vec<f64>), f: impl Fn(f64) -> f64) -> f64 {
    nodes
        .0
        .iter()
        .zip(&nodes.1)
        .map(|(t, w)| w * f(mu + std::f64::consts::SQRT_2 * sigma * t))
        .sum::<f64>()
        / std::f64::consts::PI.sqrt()
}
