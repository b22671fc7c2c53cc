//! Expected class diversity of a batch.
//!
//! A batch of `N` samples drawn over `K` equally likely categories is
//! modelled as a uniformly random composition of `N` into `K` nonnegative
//! parts (stars and bars). The number of distinct categories `M` then has
//!
//! ```text
//! P(M = k) = C(N-1, k-1) * C(K, k) / C(N+K-1, K-1)
//! ```
//!
//! and everything here is evaluated with exact big-integer arithmetic, with a
//! single rounding step at the very end. Under this model the expectation
//! reduces to `K*N / (N+K-1)`; the tests check that identity against the
//! summation before [`expected_diversity_closed_form`] is relied on.
//!
//! Note that i.i.d. multinomial draws give a different law,
//! `K * (1 - (1 - 1/K)^N)`, available as [`multinomial_diversity`] for
//! comparison with realized label streams.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Category count `K` and batch size `N`, both at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiversityQuery {
    classes: u64,
    batch_size: u64,
}

impl DiversityQuery {
    pub fn new(classes: u64, batch_size: u64) -> Result<Self> {
        if classes == 0 {
            return Err(invalid("category count K must be at least 1"));
        }
        if batch_size == 0 {
            return Err(invalid("batch size N must be at least 1"));
        }
        Ok(Self {
            classes,
            batch_size,
        })
    }

    pub fn classes(&self) -> u64 {
        self.classes
    }

    pub fn batch_size(&self) -> u64 {
        self.batch_size
    }
}

/// Exact binomial coefficient; zero when `k > n`.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    // acc stays integral: after step i it equals C(n-k+i, i).
    for i in 1..=k {
        acc *= n - k + i;
        acc /= i;
    }
    acc
}

/// `P(M = k)` for `k = 1..=K`, as exact rationals.
pub fn category_count_distribution(q: DiversityQuery) -> Vec<BigRational> {
    let (k_total, n) = (q.classes, q.batch_size);
    let denom = BigInt::from(binomial(n + k_total - 1, k_total - 1));
    (1..=k_total)
        .map(|k| {
            let ways = binomial(n - 1, k - 1) * binomial(k_total, k);
            BigRational::new(BigInt::from(ways), denom.clone())
        })
        .collect()
}

/// `E(M|N)` as an exact rational, by direct summation.
pub fn expected_diversity_exact(q: DiversityQuery) -> BigRational {
    let (k_total, n) = (q.classes, q.batch_size);
    let mut numer = BigUint::zero();
    for k in 1..=k_total {
        numer += binomial(n - 1, k - 1) * binomial(k_total, k) * k;
    }
    let denom = binomial(n + k_total - 1, k_total - 1);
    BigRational::new(BigInt::from(numer), BigInt::from(denom))
}

/// `E(M|N)` rounded once to `f64`.
pub fn expected_diversity(q: DiversityQuery) -> f64 {
    ratio_to_f64(&expected_diversity_exact(q))
}

/// `K*N / (N+K-1)`, exact.
pub fn expected_diversity_closed_form(q: DiversityQuery) -> BigRational {
    let (k, n) = (q.classes, q.batch_size);
    BigRational::new(BigInt::from(k) * n, BigInt::from(n + k - 1))
}

/// Expected distinct categories under i.i.d. uniform draws.
pub fn multinomial_diversity(classes: u64, batch_size: u64) -> f64 {
    let k = classes as f64;
    k * (1.0 - (1.0 - 1.0 / k).powf(batch_size as f64))
}

pub(crate) fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Draws a uniformly random composition of `total` into `parts` nonnegative
/// parts by placing `parts - 1` bars among `total + parts - 1` slots.
pub fn random_composition<R: Rng + ?Sized>(rng: &mut R, parts: usize, total: usize) -> Vec<usize> {
    assert!(parts >= 1, "composition needs at least one part");
    let slots = total + parts - 1;
    let mut bars = index::sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0usize;
    for &b in &bars {
        out.push(b - prev);
        prev = b + 1;
    }
    out.push(slots - prev);
    out
}

/// Monte Carlo estimate of `E(M|N)` under the composition model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: u64,
}

pub fn sample_multiset_diversity(q: DiversityQuery, trials: u64, seed: u64) -> Result<MonteCarloEstimate> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (q.classes as usize, q.batch_size as usize);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let m = random_composition(&mut rng, k, n).iter().filter(|&&c| c > 0).count() as f64;
        sum += m;
        sum_sq += m * m;
    }
    let t = trials as f64;
    let mean = sum / t;
    let std_error = if trials > 1 {
        let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
        (var / t).sqrt()
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_error,
        trials,
    })
}
