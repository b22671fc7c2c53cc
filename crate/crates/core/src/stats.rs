//! Per-channel statistics: batch moments, the test-time moving average,
//! source/target mixing and the normalization transform.
//!
//! Feature matrices are `F x N`: one row per channel, one column per sample.
//! Variances are population (divide-by-N) variances throughout.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::momentum::check_momentum;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Mean and variance per channel for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), variance.len())?;
        if mean.is_empty() {
            return Err(Error::Empty("channel statistics"));
        }
        if let Some(v) = variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(invalid(format!("variance entries must be nonnegative, got {v}")));
        }
        Ok(Self { mean, variance })
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn to_snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            format_version: SNAPSHOT_FORMAT_VERSION,
            channels: self.channels(),
            mean: self.mean.clone(),
            variance: self.variance.clone(),
        }
    }
}

/// On-disk form of [`ChannelStats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSnapshot {
    pub format_version: u32,
    #[serde(rename = "F")]
    pub channels: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl StatsSnapshot {
    pub fn into_stats(self) -> Result<ChannelStats> {
        if self.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(invalid(format!(
                "unsupported statistics snapshot version {}",
                self.format_version
            )));
        }
        check_dim(self.channels, self.mean.len())?;
        ChannelStats::new(self.mean, self.variance)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_stats(path: &Path, stats: &ChannelStats) -> Result<()> {
    std::fs::write(path, stats.to_snapshot().to_json()?)?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<ChannelStats> {
    StatsSnapshot::from_json(&std::fs::read_to_string(path)?)?.into_stats()
}

/// Per-channel mean and population variance of an `F x N` batch.
pub fn batch_moments(features: &DMatrix<f64>) -> Result<ChannelStats> {
    let (channels, n) = features.shape();
    if n == 0 || channels == 0 {
        return Err(Error::Empty("feature batch"));
    }
    // Welford, one column at a time so the inner loop walks contiguous memory.
    let mut mean = vec![0.0; channels];
    let mut m2 = vec![0.0; channels];
    for (j, col) in features.column_iter().enumerate() {
        let count = (j + 1) as f64;
        for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(col.iter()) {
            let delta = x - *mu;
            *mu += delta / count;
            *s += delta * (x - *mu);
        }
    }
    let variance = m2.into_iter().map(|s| (s / n as f64).max(0.0)).collect();
    Ok(ChannelStats { mean, variance })
}

/// Streaming moving-average estimate of target statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemaState {
    momentum: f64,
    stats: ChannelStats,
    batch_index: u64,
}

impl TemaState {
    pub fn new(momentum: f64, init: ChannelStats) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            momentum,
            stats: init,
            batch_index: 0,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn batch_index(&self) -> u64 {
        self.batch_index
    }

    /// Counts `batch` as the first observation, discarding the initial value.
    pub fn seed_with(&mut self, batch: &ChannelStats) -> Result<()> {
        check_dim(self.stats.channels(), batch.channels())?;
        self.stats = batch.clone();
        self.batch_index += 1;
        Ok(())
    }

    /// `ema <- m * batch + (1 - m) * ema`, for means and variances alike.
    pub fn update(&mut self, batch: &ChannelStats) -> Result<()> {
        check_dim(self.stats.channels(), batch.channels())?;
        let m = self.momentum;
        let keep = 1.0 - m;
        for (e, &b) in self.stats.mean.iter_mut().zip(&batch.mean) {
            *e = m * b + keep * *e;
        }
        for (e, &b) in self.stats.variance.iter_mut().zip(&batch.variance) {
            *e = (m * b + keep * *e).max(0.0);
        }
        self.batch_index += 1;
        Ok(())
    }
}

/// Weights expressing the `i`-th moving-average value as
/// `w0 * init + sum_t w[t-1] * batch_t`.
pub fn ema_weights(i: u32, m: f64) -> Result<(f64, Vec<f64>)> {
    if i == 0 {
        return Err(invalid("ema_weights needs at least one step"));
    }
    check_momentum(m)?;
    let keep = 1.0 - m;
    let w0 = keep.powi(i as i32);
    let w = (1..=i).map(|t| keep.powi((i - t) as i32) * m).collect();
    Ok((w0, w))
}

/// Moments of the two-component mixture `alpha * source + (1 - alpha) * target`.
pub fn mix_statistics(alpha: f64, source: &ChannelStats, target: &ChannelStats) -> Result<ChannelStats> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("mixing coefficient must lie in [0,1], got {alpha}")));
    }
    check_dim(source.channels(), target.channels())?;
    let beta = 1.0 - alpha;
    let mut mean = Vec::with_capacity(source.channels());
    let mut variance = Vec::with_capacity(source.channels());
    for f in 0..source.channels() {
        let (ms, mt) = (source.mean[f], target.mean[f]);
        let d = ms - mt;
        mean.push(alpha * ms + beta * mt);
        variance.push((alpha * source.variance[f] + beta * target.variance[f] + alpha * beta * d * d).max(0.0));
    }
    Ok(ChannelStats { mean, variance })
}

/// `(x - mean) / sqrt(var + eps) * scale + shift`, per channel.
pub fn normalize_features(
    features: &DMatrix<f64>,
    stats: &ChannelStats,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<DMatrix<f64>> {
    let channels = features.nrows();
    check_dim(channels, stats.channels())?;
    check_dim(channels, scale.len())?;
    check_dim(channels, shift.len())?;
    let denom: Vec<f64> = stats.variance.iter().map(|&v| (v + eps).sqrt()).collect();
    let mut out = features.clone();
    for mut col in out.column_iter_mut() {
        for (f, x) in col.iter_mut().enumerate() {
            *x = (*x - stats.mean[f]) / denom[f] * scale[f] + shift[f];
        }
    }
    Ok(out)
}

/// Normalization folded into `x * gain + offset`.
pub(crate) fn affine_coefficients(stats: &ChannelStats, scale: &[f64], shift: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let gain: Vec<f64> = stats
        .variance
        .iter()
        .zip(scale)
        .map(|(&v, &s)| s / (v + eps).sqrt())
        .collect();
    let offset = stats
        .mean
        .iter()
        .zip(&gain)
        .zip(shift)
        .map(|((&mu, &g), &b)| b - mu * g)
        .collect();
    (gain, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: &[f64], var: &[f64]) -> ChannelStats {
        ChannelStats::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    fn two_pass(features: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = features.ncols() as f64;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for row in features.row_iter() {
            let mu = row.iter().sum::<f64>() / n;
            means.push(mu);
            vars.push(row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n);
        }
        (means, vars)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-300
    }

    #[test]
    fn moments_of_two_samples() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let s = batch_moments(&x).unwrap();
        assert_eq!(s.mean(), &[2.0]);
        assert_eq!(s.variance(), &[1.0]);
    }

    #[test]
    fn constant_and_single_sample_batches() {
        let x = DMatrix::from_element(3, 7, 4.25);
        assert!(batch_moments(&x).unwrap().variance().iter().all(|&v| v == 0.0));
        let x = DMatrix::from_row_slice(2, 1, &[-1.5, 8.0]);
        let s = batch_moments(&x).unwrap();
        assert_eq!(s.mean(), &[-1.5, 8.0]);
        assert_eq!(s.variance(), &[0.0, 0.0]);
        assert!(batch_moments(&DMatrix::zeros(3, 0)).is_err());
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(f, n) in &[(1, 1), (3, 5), (17, 64), (256, 1024)] {
            let x = DMatrix::from_fn(f, n, |_, _| 5.0 + 3.0 * rng.random::<f64>());
            let s = batch_moments(&x).unwrap();
            let (mu, var) = two_pass(&x);
            for c in 0..f {
                assert!(rel_close(s.mean()[c], mu[c], 1e-12));
                assert!(rel_close(s.variance()[c], var[c], 1e-12), "{} vs {}", s.variance()[c], var[c]);
            }
        }
    }

    #[test]
    fn stats_validation() {
        assert!(ChannelStats::new(vec![0.0], vec![-1.0]).is_err());
        assert!(ChannelStats::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(ChannelStats::new(vec![], vec![]).is_err());
    }

    #[test]
    fn tema_init_copies_source() {
        let src = stats(&[0.0], &[1.0]);
        let t = TemaState::new(0.1, src.clone()).unwrap();
        assert_eq!(t.stats(), &src);
        assert_eq!(t.batch_index(), 0);
        assert!(TemaState::new(0.0, src.clone()).is_err());
        assert!(TemaState::new(1.01, src).is_err());
    }

    #[test]
    fn tema_full_replacement() {
        let mut t = TemaState::new(1.0, stats(&[5.0, 1.0], &[2.0, 3.0])).unwrap();
        let b = stats(&[-1.0, 0.5], &[0.25, 7.0]);
        t.update(&b).unwrap();
        assert_eq!(t.stats(), &b);
        assert_eq!(t.batch_index(), 1);
    }

    #[test]
    fn tema_small_momentum_is_nearly_a_no_op() {
        let prior = stats(&[3.0], &[2.0]);
        let mut t = TemaState::new(1e-9, prior.clone()).unwrap();
        t.update(&stats(&[100.0], &[50.0])).unwrap();
        assert!(rel_close(t.stats().mean()[0], 3.0, 1e-6));
        assert!(rel_close(t.stats().variance()[0], 2.0, 1e-6));
    }

    #[test]
    fn tema_reference_step() {
        let mut t = TemaState::new(0.1, stats(&[0.0], &[1.0])).unwrap();
        t.update(&stats(&[10.0], &[4.0])).unwrap();
        assert!((t.stats().mean()[0] - 1.0).abs() < 1e-15);
        assert!((t.stats().variance()[0] - 1.3).abs() < 1e-15);
        assert!(t.update(&stats(&[1.0, 2.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn ema_weight_examples() {
        let (w0, w) = ema_weights(1, 0.3).unwrap();
        assert!((w0 - 0.7).abs() < 1e-15);
        assert_eq!(w, vec![0.3]);
        let (w0, w) = ema_weights(3, 1.0).unwrap();
        assert_eq!(w0, 0.0);
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
        assert!(ema_weights(0, 0.5).is_err());
    }

    #[test]
    fn ema_weights_reconstruct_iterated_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &m in &[1.0, 0.1, 0.01, 0.001, 0.37] {
            let init = rng.random::<f64>() * 10.0;
            let mut t = TemaState::new(m, stats(&[init], &[1.0])).unwrap();
            let mut values = Vec::new();
            for i in 1..=50u32 {
                let v = rng.random::<f64>() * 20.0 - 10.0;
                values.push(v);
                t.update(&stats(&[v], &[1.0])).unwrap();
                let (w0, w) = ema_weights(i, m).unwrap();
                let recon = w0 * init + w.iter().zip(&values).map(|(a, b)| a * b).sum::<f64>();
                assert!((recon - t.stats().mean()[0]).abs() < 1e-12, "m={m} i={i}");
                let total = w0 + w.iter().sum::<f64>();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn old_batches_fall_below_threshold() {
        use crate::momentum::effective_batch_count;
        for &m in &[0.1, 0.01, 0.5] {
            let eps = 0.1;
            let lags = effective_batch_count(m, eps).unwrap() as u32;
            let i = lags + 40;
            let (_, w) = ema_weights(i, m).unwrap();
            let newest = w[(i - 1) as usize];
            // Lags strictly beyond the effective count.
            for t in 1..(i - lags) {
                assert!(w[(t - 1) as usize] / newest <= eps + 1e-12, "m={m} t={t}");
            }
        }
    }

    #[test]
    fn mixing_endpoints_and_example() {
        let s = stats(&[0.0, 1.0], &[1.0, 2.0]);
        let t = stats(&[2.0, -3.0], &[1.0, 0.5]);
        assert_eq!(mix_statistics(1.0, &s, &t).unwrap(), s);
        assert_eq!(mix_statistics(0.0, &s, &t).unwrap(), t);
        let m = mix_statistics(0.5, &stats(&[0.0], &[1.0]), &stats(&[2.0], &[1.0])).unwrap();
        assert_eq!(m.mean(), &[1.0]);
        assert_eq!(m.variance(), &[2.0]);
        assert!(mix_statistics(1.5, &s, &t).is_err());
        assert!(mix_statistics(0.5, &s, &stats(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn normalization_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let out = normalize_features(&x, &stats(&[1.0], &[1.0]), &[2.0], &[3.0], 0.0).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(4, 300, |_, _| rng.random::<f64>() * 6.0 - 1.0);
        let s = batch_moments(&x).unwrap();
        let out = normalize_features(&x, &s, &[1.0; 4], &[0.0; 4], DEFAULT_NORM_EPS).unwrap();
        let o = batch_moments(&out).unwrap();
        for f in 0..4 {
            assert!(o.mean()[f].abs() < 1e-12);
            assert!((o.variance()[f] - 1.0).abs() < 1e-4);
        }
        let zeroed = normalize_features(&x, &s, &[0.0; 4], &[0.5, 1.0, 1.5, 2.0], DEFAULT_NORM_EPS).unwrap();
        for col in zeroed.column_iter() {
            assert_eq!(col.as_slice(), &[0.5, 1.0, 1.5, 2.0]);
        }
        assert!(normalize_features(&x, &s, &[1.0; 3], &[0.0; 4], 1e-5).is_err());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let s = stats(&[0.1, 1.0 / 3.0, -2.5e-17], &[1e-300, 2.0f64.sqrt(), 7.0]);
        let json = s.to_snapshot().to_json().unwrap();
        assert!(json.contains("\"format_version\": 1"));
        assert!(json.contains("\"F\": 3"));
        let back = StatsSnapshot::from_json(&json).unwrap().into_stats().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn snapshot_rejects_bad_documents() {
        let bad_version = r#"{"format_version":2,"F":1,"mean":[0.0],"variance":[1.0]}"#;
        assert!(StatsSnapshot::from_json(bad_version).unwrap().into_stats().is_err());
        let bad_width = r#"{"format_version":1,"F":2,"mean":[0.0],"variance":[1.0]}"#;
        assert!(StatsSnapshot::from_json(bad_width).unwrap().into_stats().is_err());
        let extra = r#"{"format_version":1,"F":1,"mean":[0.0],"variance":[1.0],"x":1}"#;
        assert!(StatsSnapshot::from_json(extra).is_err());
    }

    proptest! {
        #[test]
        fn mixture_moments_match_analytic(
            alpha in 0.0f64..=1.0,
            ms in -50.0f64..50.0, vs in 1e-3f64..40.0,
            mt in -50.0f64..50.0, vt in 1e-3f64..40.0,
        ) {
            let out = mix_statistics(alpha, &stats(&[ms], &[vs]), &stats(&[mt], &[vt])).unwrap();
            // Law of total variance around the mixture mean.
            let first = alpha * ms + (1.0 - alpha) * mt;
            let var = alpha * (vs + (ms - first).powi(2)) + (1.0 - alpha) * (vt + (mt - first).powi(2));
            prop_assert!((out.mean()[0] - first).abs() <= 1e-10 * first.abs().max(1.0));
            prop_assert!((out.variance()[0] - var).abs() <= 1e-10 * var);
            prop_assert!(out.variance()[0] >= alpha * vs + (1.0 - alpha) * vt - 1e-12);
        }
    }
}
