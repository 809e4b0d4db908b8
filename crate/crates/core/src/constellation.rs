//! Real-valued constellation sets and probability mass functions over them.
//!
//! Amplitudes are stored in volts at the transmitter. Channel gains are applied
//! at the use sites and never folded into a [`Constellation`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a freshly constructed pmf.
pub const CONSTRUCTION_TOL: f64 = 1e-12;
/// Tolerance used by [`validate_pmf`]; looser than construction because
/// optimizer steps accumulate rounding.
pub const VALIDATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    amplitudes: Vec<f64>,
    peak: f64,
}

impl Constellation {
    /// Builds a constellation from explicit levels. Levels must be strictly
    /// increasing and there must be at least two of them.
    pub fn new(amplitudes: Vec<f64>) -> Result<Self> {
        if amplitudes.len() < 2 {
            return Err(Error::invalid("a constellation needs at least two symbols"));
        }
        if amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("constellation amplitudes must be finite"));
        }
        if amplitudes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("constellation amplitudes must be strictly increasing"));
        }
        let peak = amplitudes.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        Ok(Self { amplitudes, peak })
    }

    /// Uniformly spaced levels `2Ak/(S-1) - A`, `k = 0..S`.
    pub fn uniform_pam(size: usize, peak: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("PAM size must be >= 2, got {size}")));
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::invalid(format!("PAM peak must be positive, got {peak}")));
        }
        let denom = (size - 1) as f64;
        let mut amplitudes: Vec<f64> = (0..size)
            .map(|k| 2.0 * peak * k as f64 / denom - peak)
            .collect();
        // Mirror the lower half so the set is symmetric bit-for-bit.
        for k in 0..size / 2 {
            amplitudes[size - 1 - k] = -amplitudes[k];
        }
        if size % 2 == 1 {
            amplitudes[size / 2] = 0.0;
        }
        Ok(Self { amplitudes, peak })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn max_bits(&self) -> f64 {
        (self.len() as f64).log2()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    probs: Vec<f64>,
}

impl Pmf {
    /// Accepts a probability vector summing to one within [`CONSTRUCTION_TOL`].
    ///
    /// Entries in `[-1e-9, 0)` are clamped to zero and the vector is
    /// renormalized; anything more negative is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut probs = probs;
        if probs.is_empty() {
            return Err(Error::invalid("empty pmf"));
        }
        for p in probs.iter_mut() {
            if !p.is_finite() || *p < -VALIDATION_TOL || *p > 1.0 + VALIDATION_TOL {
                return Err(Error::invalid(format!("pmf entry {p} out of range")));
            }
            *p = p.clamp(0.0, 1.0);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > VALIDATION_TOL {
            return Err(Error::invalid(format!("pmf sums to {sum}")));
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        let pmf = Self { probs };
        debug_assert!((pmf.probs.iter().sum::<f64>() - 1.0).abs() <= CONSTRUCTION_TOL);
        Ok(pmf)
    }

    /// Normalizes nonnegative weights into a pmf.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn point_mass(size: usize, index: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Total-variation distance `½ Σ |p_i - q_i|`.
    pub fn total_variation(&self, other: &Pmf) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.log2())
            .sum()
    }
}

/// True iff every entry lies in `[0, 1]` and the entries sum to one within
/// [`VALIDATION_TOL`].
pub fn validate_pmf(probs: &[f64]) -> bool {
    !probs.is_empty()
        && probs.iter().all(|p| (0.0..=1.0).contains(p))
        && (probs.iter().sum::<f64>() - 1.0).abs() <= VALIDATION_TOL
}

/// `Σ θ_i x_i²` in volts².
pub fn second_moment(c: &Constellation, theta: &Pmf) -> Result<f64> {
    check_sizes(c, theta)?;
    Ok(c.amplitudes
        .iter()
        .zip(theta.probs())
        .map(|(x, p)| p * x * x)
        .sum())
}

pub(crate) fn check_sizes(c: &Constellation, theta: &Pmf) -> Result<()> {
    if c.len() != theta.len() {
        return Err(Error::invalid(format!(
            "constellation has {} symbols but pmf has {}",
            c.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// Draws a symbol index with probability `θ_i` by inverting the cumulative sum.
/// Zero-probability symbols are never returned.
pub fn sample_symbol<R: Rng + ?Sized>(theta: &Pmf, rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in theta.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Checked variant of [`sample_symbol`] for callers holding raw probability
/// slices.
pub fn sample_symbol_checked<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    if !validate_pmf(probs) {
        return Err(Error::invalid("cannot sample from an invalid pmf"));
    }
    Ok(sample_symbol(&Pmf::new(probs.to_vec())?, rng))
}
