//! Synthetic corruptions and their ordering over a test stream.
//!
//! A corruption is a per-channel affine map on the input features,
//! `x -> scale * x + offset`, whose magnitude grows linearly with severity
//! (0 = identity, 5 = the configured maximum). Labels are untouched, so the
//! shift is a pure covariate shift.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::GaussianMoments;
use crate::error::{check_dim, invalid, Error, Result};

pub const MAX_SEVERITY: u8 = 5;
pub const GRADUAL_RAMP: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

/// Seeded per-corruption directions for offset and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionBank {
    offset_dirs: Vec<DVector<f64>>,
    scale_dirs: Vec<DVector<f64>>,
    max_offset: f64,
    max_scale: f64,
}

/// A concrete corruption at one severity.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub scale: DVector<f64>,
    pub offset: DVector<f64>,
}

impl CorruptionBank {
    /// `max_offset` scales standard-normal per-channel offsets; `max_scale`
    /// bounds the per-channel relative gain change and must stay below one.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, count: usize, width: usize, max_offset: f64, max_scale: f64) -> Result<Self> {
        if count == 0 || width == 0 {
            return Err(Error::Empty("corruption bank"));
        }
        if !(max_offset >= 0.0) {
            return Err(invalid(format!("max_offset must be nonnegative, got {max_offset}")));
        }
        if !(0.0..1.0).contains(&max_scale) {
            return Err(invalid(format!("max_scale must lie in [0,1), got {max_scale}")));
        }
        let mut offset_dirs = Vec::with_capacity(count);
        let mut scale_dirs = Vec::with_capacity(count);
        for _ in 0..count {
            offset_dirs.push(DVector::from_fn(width, |_, _| rng.sample::<f64, _>(StandardNormal)));
            scale_dirs.push(DVector::from_fn(width, |_, _| rng.random_range(-1.0..=1.0)));
        }
        Ok(Self {
            offset_dirs,
            scale_dirs,
            max_offset,
            max_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.offset_dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset_dirs.is_empty()
    }

    pub fn corruption(&self, id: usize, severity: u8) -> Result<Corruption> {
        if id >= self.len() {
            return Err(invalid(format!("unknown corruption id {id} (bank has {})", self.len())));
        }
        if severity > MAX_SEVERITY {
            return Err(invalid(format!("severity {severity} outside 0..={MAX_SEVERITY}")));
        }
        let level = f64::from(severity) / f64::from(MAX_SEVERITY);
        Ok(Corruption {
            scale: self.scale_dirs[id].map(|u| 1.0 + level * self.max_scale * u),
            offset: self.offset_dirs[id].map(|o| level * self.max_offset * o),
        })
    }
}

impl Corruption {
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.scale.len(), x.nrows())?;
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            for (f, v) in col.iter_mut().enumerate() {
                *v = self.scale[f] * *v + self.offset[f];
            }
        }
        Ok(out)
    }

    /// Moments of the corrupted distribution.
    pub fn moments(&self, clean: &GaussianMoments) -> GaussianMoments {
        let mut cov = clean.cov.clone();
        for (j, mut col) in cov.column_iter_mut().enumerate() {
            col.component_mul_assign(&self.scale);
            col *= self.scale[j];
        }
        GaussianMoments {
            mean: clean.mean.component_mul(&self.scale) + &self.offset,
            cov,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// One domain after another.
    #[default]
    Continual,
    /// Domains interleaved batch by batch.
    Mixed,
    /// Severity ramps up and down within each corruption.
    Gradual,
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ordering::Continual => "continual",
            Ordering::Mixed => "mixed",
            Ordering::Gradual => "gradual",
        })
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continual" => Ok(Ordering::Continual),
            "mixed" => Ok(Ordering::Mixed),
            "gradual" => Ok(Ordering::Gradual),
            other => Err(invalid(format!("unknown ordering `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub ordering: Ordering,
    /// Corruption ids, in stream order for `continual` and `gradual`.
    pub corruptions: Vec<usize>,
    /// Severity for `continual` and `mixed`; `gradual` uses its own ramp.
    pub severity: u8,
    /// Test samples per (corruption, severity) segment.
    pub samples_per_segment: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            ordering: Ordering::Continual,
            corruptions: (0..15).collect(),
            severity: MAX_SEVERITY,
            // Divisible by every default batch size, so segments hold equal samples.
            samples_per_segment: 6400,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self, bank_size: usize) -> Result<()> {
        if self.corruptions.is_empty() {
            return Err(invalid("scenario needs at least one corruption"));
        }
        if let Some(id) = self.corruptions.iter().find(|&&id| id >= bank_size) {
            return Err(invalid(format!("unknown corruption id {id} (bank has {bank_size})")));
        }
        if self.severity > MAX_SEVERITY {
            return Err(invalid(format!("severity {} outside 0..={MAX_SEVERITY}", self.severity)));
        }
        if self.samples_per_segment == 0 {
            return Err(invalid("samples_per_segment must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub corruption_id: usize,
    pub severity: u8,
    pub batch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScenario {
    pub ordering: Ordering,
    pub segments: Vec<Segment>,
}

impl ShiftScenario {
    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batch_count).sum()
    }

    /// `(corruption_id, severity)` of every batch, in stream order.
    pub fn batches(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n((s.corruption_id, s.severity), s.batch_count))
    }
}

/// Lays out the stream for a given test batch size.
pub fn make_scenario<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    bank_size: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<ShiftScenario> {
    spec.validate(bank_size)?;
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let batch_count = spec.samples_per_segment.div_ceil(batch_size);
    let segments = match spec.ordering {
        Ordering::Continual => spec
            .corruptions
            .iter()
            .map(|&id| Segment {
                corruption_id: id,
                severity: spec.severity,
                batch_count,
            })
            .collect(),
        Ordering::Gradual => spec
            .corruptions
            .iter()
            .flat_map(|&id| {
                GRADUAL_RAMP.iter().map(move |&severity| Segment {
                    corruption_id: id,
                    severity,
                    batch_count,
                })
            })
            .collect(),
        Ordering::Mixed => {
            let mut per_batch: Vec<usize> = spec
                .corruptions
                .iter()
                .flat_map(|&id| std::iter::repeat_n(id, batch_count))
                .collect();
            per_batch.shuffle(rng);
            per_batch
                .into_iter()
                .map(|id| Segment {
                    corruption_id: id,
                    severity: spec.severity,
                    batch_count: 1,
                })
                .collect()
        }
    };
    Ok(ShiftScenario {
        ordering: spec.ordering,
        segments,
    })
}
