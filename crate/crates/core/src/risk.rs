//! Empirical value-at-risk and conditional value-at-risk.
//!
//! For `K` losses and significance level `alpha`, VaR is the
//! `ceil((1 - alpha) K)`-th smallest loss (the lower `(1 - alpha)`-quantile).
//! It is also the smallest minimizer of the Rockafellar objective
//!
//! ```text
//! F(beta) = beta + 1 / (alpha K) * sum_k [loss_k - beta]_+
//! ```
//!
//! whose minimum value is the CVaR. The Rockafellar form is well defined for
//! every `alpha` in `(0, 1]`; the tail-average form is only used when
//! `alpha K` is an integer, where the two coincide.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("no losses given")]
    Empty,
    #[error("significance level must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("alpha * K = {alpha} * {n} is below one sample")]
    TailTooSmall { alpha: f64, n: usize },
    #[error("softplus sharpness must be positive, got {0}")]
    InvalidSharpness(f64),
    #[error("histogram needs at least one bin")]
    NoBins,
}

const INTEGER_SLACK: f64 = 1e-9;

fn check(losses: &[f64], alpha: f64) -> Result<(), RiskError> {
    if losses.is_empty() {
        return Err(RiskError::Empty);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    Ok(())
}

fn sorted(losses: &[f64]) -> Vec<f64> {
    let mut s = losses.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of samples in the `alpha` tail if that number is integral.
fn integral_tail(alpha: f64, n: usize) -> Option<usize> {
    let m = alpha * n as f64;
    let r = m.round();
    ((m - r).abs() < INTEGER_SLACK && r >= 1.0).then_some(r as usize)
}

/// 1-based rank of the VaR order statistic.
fn var_rank(alpha: f64, n: usize) -> usize {
    let k = ((1.0 - alpha) * n as f64 - INTEGER_SLACK).ceil();
    (k.max(1.0) as usize).min(n)
}

pub fn var(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check(losses, alpha)?;
    let s = sorted(losses);
    Ok(s[var_rank(alpha, s.len()) - 1])
}

/// Mean of the `alpha K` largest losses.
///
/// Falls back to the Rockafellar form when `alpha K` is not an integer.
pub fn cvar_indicator(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check(losses, alpha)?;
    let n = losses.len();
    if alpha * (n as f64) < 1.0 - INTEGER_SLACK {
        return Err(RiskError::TailTooSmall { alpha, n });
    }
    match integral_tail(alpha, n) {
        Some(m) => {
            let s = sorted(losses);
            Ok(s[n - m..].iter().sum::<f64>() / m as f64)
        }
        None => cvar_rockafellar(losses, alpha).map(|c| c.cvar),
    }
}

/// The exact (hinge) Rockafellar objective at a given `beta`.
pub fn rockafellar_objective(losses: &[f64], alpha: f64, beta: f64) -> f64 {
    let scale = 1.0 / (alpha * losses.len() as f64);
    beta + scale * losses.iter().map(|&l| (l - beta).max(0.0)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvarEstimate {
    pub cvar: f64,
    /// Smallest minimizing `beta`; equals [`var`].
    pub beta_star: f64,
}

/// Minimizes the Rockafellar objective exactly.
///
/// The objective is piecewise linear and convex in `beta` with kinks at the
/// losses, so it suffices to evaluate it at every order statistic.
pub fn cvar_rockafellar(losses: &[f64], alpha: f64) -> Result<CvarEstimate, RiskError> {
    check(losses, alpha)?;
    let s = sorted(losses);
    let n = s.len();
    let scale = 1.0 / (alpha * n as f64);

    // above[j] = sum of s[j+1..], accumulated from the largest loss down.
    let mut above = vec![0.0; n];
    for j in (0..n - 1).rev() {
        above[j] = above[j + 1] + s[j + 1];
    }

    let mut best = CvarEstimate {
        cvar: f64::INFINITY,
        beta_star: s[0],
    };
    for (j, &beta) in s.iter().enumerate() {
        let count = (n - 1 - j) as f64;
        let value = beta + scale * (above[j] - count * beta);
        if value < best.cvar {
            best = CvarEstimate {
                cvar: value,
                beta_star: beta,
            };
        }
    }
    // The lower quantile always minimizes; report it so beta_star == var.
    let rank_beta = s[var_rank(alpha, n) - 1];
    let at_rank = rockafellar_objective(&s, alpha, rank_beta);
    if at_rank <= best.cvar + 1e-12 * best.cvar.abs().max(1.0) {
        best.beta_star = rank_beta;
    }
    Ok(best)
}

/// `log(1 + exp(a))` without overflow.
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Softplus-smoothed Rockafellar objective together with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCvar {
    pub value: f64,
    pub d_beta: f64,
    pub d_losses: Vec<f64>,
}

pub fn smoothed_cvar(losses: &[f64], alpha: f64, beta: f64, tau: f64) -> Result<f64, RiskError> {
    smoothed_cvar_grad(losses, alpha, beta, tau).map(|s| s.value)
}

/// `beta + 1/(alpha K) * sum_k tau * softplus((loss_k - beta) / tau)`.
pub fn smoothed_cvar_grad(
    losses: &[f64],
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<SmoothedCvar, RiskError> {
    check(losses, alpha)?;
    if !(tau > 0.0) {
        return Err(RiskError::InvalidSharpness(tau));
    }
    let scale = 1.0 / (alpha * losses.len() as f64);
    let mut value = 0.0;
    let mut weight_sum = 0.0;
    let mut d_losses = Vec::with_capacity(losses.len());
    for &l in losses {
        let a = (l - beta) / tau;
        value += tau * softplus(a);
        let w = sigmoid(a);
        weight_sum += w;
        d_losses.push(scale * w);
    }
    Ok(SmoothedCvar {
        value: beta + scale * value,
        d_beta: 1.0 - scale * weight_sum,
        d_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub alpha: f64,
    pub var: f64,
    pub cvar: f64,
    pub mean: f64,
    pub max: f64,
    pub n_samples: usize,
}

impl RiskReport {
    pub fn from_losses(losses: &[f64], alpha: f64) -> Result<Self, RiskError> {
        let est = cvar_rockafellar(losses, alpha)?;
        Ok(Self {
            alpha,
            var: est.beta_star,
            cvar: est.cvar,
            mean: losses.iter().sum::<f64>() / losses.len() as f64,
            max: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_samples: losses.len(),
        })
    }
}

/// Largest absolute deviation in one voltage sample.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Risk of per-sample worst-bus voltage deviations.
pub fn voltage_risk<V: AsRef<[f64]>>(v_samples: &[V], alpha: f64) -> Result<RiskReport, RiskError> {
    let losses: Vec<f64> = v_samples.iter().map(|v| max_abs(v.as_ref())).collect();
    RiskReport::from_losses(&losses, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped into the end bins.
    pub fn with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self, RiskError> {
        if bins == 0 {
            return Err(RiskError::NoBins);
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0.0 } else { b.clamp(0.0, (bins - 1) as f64) };
            counts[b as usize] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn new(values: &[f64], bins: usize) -> Result<Self, RiskError> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self::with_range(values, bins, 0.0, 1.0);
        }
        Self::with_range(values, bins, lo, hi)
    }

    /// `bin_lo,bin_hi,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}
