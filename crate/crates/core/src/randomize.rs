//! Treatment assignment: seeded complete randomization within strata,
//! exhaustive enumeration, and the random variate generators used by the
//! simulation harness.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha` pinned to
//! 0.3.1) keyed by `(seed, replicate)` through SplitMix64 with the stratum or
//! purpose as the ChaCha stream id. Streams therefore never depend on the
//! order in which replicates are evaluated.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiment::StratumLayout;

/// Default ceiling on the number of enumerated assignments.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

/// Replicate index reserved for population generation.
pub const POPULATION_REPLICATE: u64 = u64::MAX;

/// Master seed of a reproducible computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Seed {
    /// Independent generator for `(replicate, lane)`; lanes are strata or
    /// named purposes.
    pub fn stream(&self, replicate: u64, lane: u64) -> ChaCha8Rng {
        let mut state = splitmix64(self.0) ^ splitmix64(replicate.rotate_left(17) ^ 0xA076_1D64_78BD_642F);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(lane);
        rng
    }
}

/// Uniform draw on `[0, 1)` with 53 random bits.
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer on `0..n` (Lemire's multiply-shift with rejection).
pub fn below<R: RngCore>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0);
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = (rng.next_u64() as u128) * (n as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Box–Muller normal variate.
pub fn sample_normal<R: RngCore>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    if !mean.is_finite() || !sd.is_finite() || sd < 0.0 {
        return Err(Error::DomainError(format!("normal(mean={mean}, sd={sd})")));
    }
    Ok(mean + sd * standard_normal(rng))
}

fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = 1.0 - uniform01(rng);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gamma variate with the given shape and rate (mean `shape / rate`),
/// Marsaglia–Tsang squeeze; shapes below one are boosted.
pub fn sample_gamma<R: RngCore>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
        return Err(Error::DomainError(format!("gamma(shape={shape}, rate={rate})")));
    }
    if shape < 1.0 {
        let g = marsaglia_tsang(shape + 1.0, rng);
        let u = 1.0 - uniform01(rng);
        return Ok(g * u.powf(1.0 / shape) / rate);
    }
    Ok(marsaglia_tsang(shape, rng) / rate)
}

fn marsaglia_tsang<R: RngCore>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = uniform01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u > 0.0 && u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Treatment indicators aligned with unit order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment(Vec<bool>);

impl Assignment {
    pub fn new(treated: Vec<bool>) -> Self {
        Self(treated)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Compact `0`/`1` rendering for reports.
    pub fn bits(&self) -> String {
        self.0.iter().map(|&t| if t { '1' } else { '0' }).collect()
    }
}

fn n_units(layouts: &[StratumLayout]) -> usize {
    layouts
        .iter()
        .flat_map(|s| s.members.iter())
        .map(|&i| i + 1)
        .max()
        .unwrap_or(0)
}

/// Complete randomization within each stratum, independent across strata.
pub fn assign_within_strata(layouts: &[StratumLayout], seed: Seed, replicate: u64) -> Assignment {
    let mut z = vec![false; n_units(layouts)];
    let mut pool = Vec::new();
    for (b, s) in layouts.iter().enumerate() {
        let mut rng = seed.stream(replicate, b as u64);
        pool.clear();
        pool.extend_from_slice(&s.members);
        let n = pool.len();
        for j in 0..s.n_treated {
            let r = j + below(&mut rng, (n - j) as u64) as usize;
            pool.swap(j, r);
            z[pool[j]] = true;
        }
    }
    Assignment(z)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of admissible assignments, `Π_b C(n_b, n_b1)`, saturating.
pub fn count_assignments(layouts: &[StratumLayout]) -> u128 {
    layouts
        .iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(binomial(s.n(), s.n_treated)))
        .unwrap_or(u128::MAX)
}

/// Positions (within `0..n`) of the combination with the given rank in the
/// combinatorial number system.
pub fn unrank_combination(mut rank: u128, n: usize, k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    let mut upper = n;
    for i in (1..=k).rev() {
        let mut c = i - 1;
        while c + 1 < upper && binomial(c + 1, i) <= rank {
            c += 1;
        }
        rank -= binomial(c, i);
        out[i - 1] = c;
        upper = c;
    }
    out
}

/// Every admissible assignment exactly once. Strata are ordered as given,
/// the first stratum most significant; within a stratum combinations follow
/// their rank.
pub fn enumerate_assignments(layouts: &[StratumLayout], cap: u128) -> Result<AssignmentEnumerator> {
    let count = count_assignments(layouts);
    if count > cap {
        return Err(Error::TooManyAssignments { count, cap });
    }
    let combos = layouts
        .iter()
        .map(|s| {
            (0..binomial(s.n(), s.n_treated))
                .map(|r| {
                    unrank_combination(r, s.n(), s.n_treated)
                        .into_iter()
                        .map(|pos| s.members[pos])
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(AssignmentEnumerator {
        combos,
        ranks: vec![0; layouts.len()],
        n: n_units(layouts),
        remaining: count,
        count,
    })
}

#[derive(Debug, Clone)]
pub struct AssignmentEnumerator {
    combos: Vec<Vec<Vec<usize>>>,
    ranks: Vec<usize>,
    n: usize,
    remaining: u128,
    count: u128,
}

impl AssignmentEnumerator {
    pub fn total(&self) -> u128 {
        self.count
    }
}

impl Iterator for AssignmentEnumerator {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        if self.remaining == 0 {
            return None;
        }
        let mut z = vec![false; self.n];
        for (b, &r) in self.ranks.iter().enumerate() {
            for &i in &self.combos[b][r] {
                z[i] = true;
            }
        }
        self.remaining -= 1;
        for b in (0..self.ranks.len()).rev() {
            self.ranks[b] += 1;
            if self.ranks[b] < self.combos[b].len() {
                break;
            }
            self.ranks[b] = 0;
        }
        Some(Assignment(z))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (r, Some(r))
    }
}
