//! Momentum selection for the test-time moving average.
//!
//! A moving average with momentum `m` effectively pools the last
//! `floor(log_{1-m} eps)` batches. The selected momentum minimises
//!
//! ```text
//! |E(M|N_s) / E(M|N_pool) - 1| + lambda * N_pool / N_s
//! ```
//!
//! over a fixed grid: the first term matches the class diversity seen during
//! training, the second keeps the pool (and therefore the lag) small.

use serde::{Deserialize, Serialize};

use crate::diversity::{expected_diversity, DiversityQuery};
use crate::error::{invalid, Result};

pub const DEFAULT_GRID: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_SOURCE_BATCH: u64 = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumConfig {
    pub grid: Vec<f64>,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID.to_vec(),
            epsilon: DEFAULT_EPSILON,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl MomentumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(invalid("momentum grid is empty"));
        }
        for &m in &self.grid {
            check_momentum(m)?;
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0,1), got {}", self.epsilon)));
        }
        // lambda = 0 is accepted so a pure diversity-matching objective can be inspected.
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

pub(crate) fn check_momentum(m: f64) -> Result<()> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(invalid(format!("momentum must lie in (0,1], got {m}")));
    }
    Ok(())
}

/// Result of the grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumChoice {
    pub m_star: f64,
    pub pool_size: u64,
    /// `(m, objective)` in grid order.
    pub objective_values: Vec<(f64, f64)>,
}

/// Number of batches whose relative weight stays above `epsilon`.
///
/// `m = 1` keeps only the current batch. The result is never below one: the
/// current batch always contributes.
pub fn effective_batch_count(m: f64, epsilon: f64) -> Result<u64> {
    check_momentum(m)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if m == 1.0 {
        return Ok(1);
    }
    let ratio = epsilon.ln() / (1.0 - m).ln();
    // Absorb rounding when the logarithm ratio is an integer.
    let count = (ratio + 1e-9).floor();
    Ok((count as u64).max(1))
}

pub fn effective_pool(m: f64, batch_size: u64, epsilon: f64) -> Result<u64> {
    if batch_size == 0 {
        return Err(invalid("test batch size must be at least 1"));
    }
    Ok(effective_batch_count(m, epsilon)? * batch_size)
}

pub fn momentum_objective(
    m: f64,
    source_batch: u64,
    target_batch: u64,
    classes: u64,
    cfg: &MomentumConfig,
) -> Result<f64> {
    let pool = effective_pool(m, target_batch, cfg.epsilon)?;
    let source_div = expected_diversity(DiversityQuery::new(classes, source_batch)?);
    let target_div = expected_diversity(DiversityQuery::new(classes, pool)?);
    Ok((source_div / target_div - 1.0).abs() + cfg.lambda * pool as f64 / source_batch as f64)
}

/// Grid search; ties go to the larger momentum.
pub fn select_momentum(
    source_batch: u64,
    target_batch: u64,
    classes: u64,
    cfg: &MomentumConfig,
) -> Result<MomentumChoice> {
    cfg.validate()?;
    let mut objective_values = Vec::with_capacity(cfg.grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &m in &cfg.grid {
        let value = momentum_objective(m, source_batch, target_batch, classes, cfg)?;
        objective_values.push((m, value));
        best = match best {
            Some((bm, bv)) if bv < value || (bv == value && bm >= m) => Some((bm, bv)),
            _ => Some((m, value)),
        };
    }
    let (m_star, _) = best.expect("grid is nonempty");
    Ok(MomentumChoice {
        m_star,
        pool_size: effective_pool(m_star, target_batch, cfg.epsilon)?,
        objective_values,
    })
}
