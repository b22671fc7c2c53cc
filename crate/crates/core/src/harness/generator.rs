//! Labelled Gaussian-mixture source data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diversity::random_composition;
use crate::engine::GaussianMoments;
use crate::error::{invalid, Error, Result};

/// How the class labels of a batch are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    /// Every label i.i.d. uniform over the classes.
    #[default]
    IidUniform,
    /// Class counts form a uniformly random composition of the batch size.
    UniformMultiset,
    /// Exactly `d` distinct classes per batch.
    FixedDiversity(usize),
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::IidUniform => write!(f, "iid_uniform"),
            Sampler::UniformMultiset => write!(f, "uniform_multiset"),
            Sampler::FixedDiversity(d) => write!(f, "fixed_diversity({d})"),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iid_uniform" => Ok(Sampler::IidUniform),
            "uniform_multiset" => Ok(Sampler::UniformMultiset),
            other => other
                .strip_prefix("fixed_diversity(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|d| d.trim().parse::<usize>().ok())
                .filter(|&d| d >= 1)
                .map(Sampler::FixedDiversity)
                .ok_or_else(|| invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

impl Serialize for Sampler {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sampler {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceGenerator {
    /// `K x F_0`, one class mean per row.
    class_means: DMatrix<f64>,
    /// Per-class, per-channel variances (`K x F_0`).
    class_var: DMatrix<f64>,
    sampler: Sampler,
}

impl SourceGenerator {
    pub fn new(class_means: DMatrix<f64>, class_var: DMatrix<f64>, sampler: Sampler) -> Result<Self> {
        if class_means.nrows() == 0 || class_means.ncols() == 0 {
            return Err(Error::Empty("class means"));
        }
        if class_var.shape() != class_means.shape() {
            return Err(invalid("class variances must match the class-mean shape"));
        }
        if class_var.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("class variances must be positive"));
        }
        if let Sampler::FixedDiversity(d) = sampler {
            if d == 0 || d > class_means.nrows() {
                return Err(invalid(format!(
                    "fixed diversity {d} outside 1..={}",
                    class_means.nrows()
                )));
            }
        }
        Ok(Self {
            class_means,
            class_var,
            sampler,
        })
    }

    /// Seeded random class means whose closest pair is exactly `separation`
    /// apart (in units of the class standard deviation), with isotropic
    /// per-class variance `variance`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        classes: usize,
        width: usize,
        separation: f64,
        variance: f64,
        sampler: Sampler,
    ) -> Result<Self> {
        if classes == 0 || width == 0 {
            return Err(Error::Empty("generator dimensions"));
        }
        if !(separation >= 0.0) || !(variance > 0.0) {
            return Err(invalid("separation must be nonnegative and variance positive"));
        }
        let mut means = DMatrix::from_fn(classes, width, |_, _| rng.sample::<f64, _>(StandardNormal));
        let centroid = means.row_mean();
        for mut row in means.row_iter_mut() {
            row -= &centroid;
        }
        let mut closest = f64::INFINITY;
        for i in 0..classes {
            for j in (i + 1)..classes {
                closest = closest.min((means.row(i) - means.row(j)).norm());
            }
        }
        if closest.is_finite() && closest > 0.0 {
            means *= separation * variance.sqrt() / closest;
        } else {
            means.fill(0.0);
        }
        Self::new(means, DMatrix::from_element(classes, width, variance), sampler)
    }

    pub fn classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn width(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn sampler(&self) -> Sampler {
        self.sampler
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Result<Self> {
        let means = std::mem::replace(&mut self.class_means, DMatrix::zeros(0, 0));
        Self::new(means, self.class_var, sampler)
    }

    pub fn class_means(&self) -> &DMatrix<f64> {
        &self.class_means
    }

    /// Labels for one batch of size `n`.
    pub fn sample_labels<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        let k = self.classes();
        match self.sampler {
            Sampler::IidUniform => Ok((0..n).map(|_| rng.random_range(0..k)).collect()),
            Sampler::UniformMultiset => {
                let counts = random_composition(rng, k, n);
                let mut labels: Vec<usize> = counts
                    .iter()
                    .enumerate()
                    .flat_map(|(c, &count)| std::iter::repeat_n(c, count))
                    .collect();
                labels.shuffle(rng);
                Ok(labels)
            }
            Sampler::FixedDiversity(d) => {
                if n < d {
                    return Err(invalid(format!("batch of {n} cannot hold {d} distinct classes")));
                }
                let chosen = index::sample(rng, k, d).into_vec();
                let mut labels = chosen.clone();
                labels.extend((d..n).map(|_| chosen[rng.random_range(0..d)]));
                labels.shuffle(rng);
                Ok(labels)
            }
        }
    }

    /// Draws features (`F_0 x n`) for the given labels.
    pub fn sample_features<R: Rng + ?Sized>(&self, rng: &mut R, labels: &[usize]) -> DMatrix<f64> {
        let width = self.width();
        let mut x = DMatrix::zeros(width, labels.len());
        for (j, &y) in labels.iter().enumerate() {
            for f in 0..width {
                let z: f64 = rng.sample(StandardNormal);
                x[(f, j)] = self.class_means[(y, f)] + z * self.class_var[(y, f)].sqrt();
            }
        }
        x
    }

    /// Labels and features for one batch. Under i.i.d. sampling each sample
    /// is drawn whole (label, then features), so the sample sequence does not
    /// depend on how the stream is cut into batches.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<(DMatrix<f64>, Vec<usize>)> {
        if self.sampler == Sampler::IidUniform {
            let mut x = DMatrix::zeros(self.width(), n);
            let mut labels = Vec::with_capacity(n);
            for j in 0..n {
                let y = rng.random_range(0..self.classes());
                x.set_column(j, &self.sample_features(rng, &[y]).column(0));
                labels.push(y);
            }
            return Ok((x, labels));
        }
        let labels = self.sample_labels(rng, n)?;
        Ok((self.sample_features(rng, &labels), labels))
    }

    /// Population mean and covariance under uniform class probabilities.
    pub fn population_moments(&self) -> GaussianMoments {
        let k = self.classes() as f64;
        let mean: DVector<f64> = self.class_means.row_mean().transpose();
        let mut cov = DMatrix::from_diagonal(&self.class_var.row_mean().transpose());
        for row in self.class_means.row_iter() {
            let d = row.transpose() - &mean;
            cov += &d * d.transpose() / k;
        }
        GaussianMoments { mean, cov }
    }
}
