//! Layer-wise rectification: per-layer source/target divergence mapped to
//! per-layer mixing coefficients, smoothed over time into a global prior.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::stats::ChannelStats;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_KL_EPS: f64 = 1e-12;

/// How per-channel divergences are reduced to one number per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifierParams {
    /// Upper bound on any mixing coefficient.
    pub gamma: f64,
    /// Smoothing rate of the global prior.
    pub tau: f64,
    /// Variance floor inside the divergence.
    pub kl_eps: f64,
    pub reduction: Reduction,
}

impl Default for RectifierParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            kl_eps: DEFAULT_KL_EPS,
            reduction: Reduction::Mean,
        }
    }
}

impl RectifierParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma must lie in [0,1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid(format!("tau must lie in [0,1], got {}", self.tau)));
        }
        if !(self.kl_eps > 0.0) {
            return Err(invalid(format!("kl_eps must be positive, got {}", self.kl_eps)));
        }
        Ok(())
    }
}

/// Global prior over per-layer mixing coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifierState {
    prior: Vec<f64>,
    gamma: f64,
    tau: f64,
    step: u64,
}

impl RectifierState {
    /// Starts from an all-zero prior.
    pub fn new(layers: usize, gamma: f64, tau: f64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Empty("rectifier layers"));
        }
        RectifierParams {
            gamma,
            tau,
            ..Default::default()
        }
        .validate()?;
        Ok(Self {
            prior: vec![0.0; layers],
            gamma,
            tau,
            step: 0,
        })
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `prior <- tau * fresh + (1 - tau) * prior`.
    pub fn update_prior(&mut self, fresh: &[f64]) -> Result<()> {
        check_dim(self.prior.len(), fresh.len())?;
        if let Some(a) = fresh.iter().find(|a| !(0.0..=self.gamma).contains(*a)) {
            return Err(invalid(format!("fresh coefficient {a} outside [0, {}]", self.gamma)));
        }
        let keep = 1.0 - self.tau;
        for (p, &a) in self.prior.iter_mut().zip(fresh) {
            *p = (self.tau * a + keep * *p).clamp(0.0, self.gamma);
        }
        self.step += 1;
        Ok(())
    }
}

/// Per-layer divergences; finite and nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceVector(Vec<f64>);

impl DivergenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("divergence must be finite and nonnegative, got {v}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `KL(N(m1, v1) || N(m2, v2))` for variances `v1`, `v2`.
pub fn kl_univariate(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let d = m1 - m2;
    0.5 * (v2 / v1).ln() + (v1 + d * d) / (2.0 * v2) - 0.5
}

/// Symmetric KL between diagonal Gaussians, averaged over channels.
pub fn gaussian_sym_kl(p: &ChannelStats, q: &ChannelStats, eps: f64) -> Result<f64> {
    gaussian_sym_kl_with(p, q, eps, Reduction::Mean)
}

pub fn gaussian_sym_kl_with(p: &ChannelStats, q: &ChannelStats, eps: f64, reduction: Reduction) -> Result<f64> {
    check_dim(p.channels(), q.channels())?;
    if !(eps > 0.0) {
        return Err(invalid(format!("variance floor must be positive, got {eps}")));
    }
    let mut total = 0.0;
    for f in 0..p.channels() {
        let (m1, v1) = (p.mean()[f], p.variance()[f].max(eps));
        let (m2, v2) = (q.mean()[f], q.variance()[f].max(eps));
        let sym = 0.5 * kl_univariate(m1, v1, m2, v2) + 0.5 * kl_univariate(m2, v2, m1, v1);
        total += sym.max(0.0);
    }
    Ok(match reduction {
        Reduction::Mean => total / p.channels() as f64,
        Reduction::Sum => total,
    })
}

/// Standardize across layers, clip to `[-1, 1]`, map into `[0, gamma]`.
///
/// Constant divergence vectors (including a single layer) standardize to zero
/// and therefore map to `gamma / 2`.
pub fn divergence_to_alpha(d: &DivergenceVector, gamma: f64) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::Empty("divergence vector"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0,1], got {gamma}")));
    }
    let values = d.values();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    // Below this spread the z-scores are rounding noise.
    let degenerate = std <= 1e-12 * scale || std == 0.0;
    Ok(values
        .iter()
        .map(|v| {
            let z = if degenerate { 0.0 } else { (v - mean) / std };
            (gamma * (z.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, gamma)
        })
        .collect())
}
