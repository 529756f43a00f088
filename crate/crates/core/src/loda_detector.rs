//! Loda: an ensemble of one-dimensional histograms over random projections.
//!
//! The anomaly score of a point is the mean negative log bin probability of
//! its projections, in nats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_model::Hypothesis;

pub const FEATURE_DIM: usize = 4;
pub const MIN_TRAINING: usize = 50;
const MODEL_VERSION: u32 = 1;
const RESAMPLE_ATTEMPTS: usize = 16;

#[derive(Debug, Error)]
pub enum LodaError {
    #[error("need at least {needed} benign samples, got {got}")]
    UnderTrained { needed: usize, got: usize },
    #[error("non-finite training feature at index {0}")]
    NonFinite(usize),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Piecewise-constant density over a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Strictly increasing, one more than `probs`.
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
    /// Probability used outside the edges.
    pub floor: f64,
}

impl Histogram {
    /// Builds a Laplace-smoothed histogram with Freedman-Diaconis bins.
    pub fn build(values: &[f64]) -> Self {
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[n - 1];
        let floor = 1.0 / (10.0 * n as f64);
        if !(hi > lo) {
            return Histogram {
                edges: vec![lo - 0.5, lo + 0.5],
                probs: vec![1.0],
                floor,
            };
        }
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let width = if iqr > 0.0 {
            2.0 * iqr / (n as f64).cbrt()
        } else {
            (hi - lo) / (n as f64).sqrt()
        };
        let bins = ((hi - lo) / width).ceil().clamp(1.0, n as f64) as usize;
        let step = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + step * i as f64).collect();
        edges[bins] = hi;
        let mut counts = vec![0usize; bins];
        for &v in values {
            counts[bin_of(&edges, v).expect("training value inside its own range")] += 1;
        }
        let denom = (n + bins) as f64;
        let probs = counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect();
        Histogram { edges, probs, floor }
    }

    pub fn probability(&self, v: f64) -> f64 {
        match bin_of(&self.edges, v) {
            Some(i) => self.probs[i],
            None => self.floor,
        }
    }
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let bins = edges.len() - 1;
    if !(v >= edges[0] && v <= edges[bins]) {
        return None;
    }
    // last edge is inclusive
    let i = edges.partition_point(|&e| e <= v);
    Some(i.saturating_sub(1).min(bins - 1))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodaModel {
    pub version: u32,
    pub seed: u64,
    pub projections: Vec<[f64; FEATURE_DIM]>,
    pub histograms: Vec<Histogram>,
    pub trained_on: usize,
}

impl LodaModel {
    /// Trains `k` projections on benign features. Deterministic in `seed`.
    pub fn train(benign: &[[f64; FEATURE_DIM]], k: usize, seed: u64) -> Result<Self, LodaError> {
        if benign.len() < MIN_TRAINING {
            return Err(LodaError::UnderTrained {
                needed: MIN_TRAINING,
                got: benign.len(),
            });
        }
        if let Some(i) = benign.iter().position(|z| z.iter().any(|v| !v.is_finite())) {
            return Err(LodaError::NonFinite(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projections = Vec::with_capacity(k);
        let mut histograms = Vec::with_capacity(k);
        for i in 0..k {
            let mut attempt = 0;
            let (v, values) = loop {
                let v: [f64; FEATURE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let values: Vec<f64> = benign.iter().map(|z| dot(&v, z)).collect();
                let spread = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
                attempt += 1;
                if spread.1 > spread.0 || attempt >= RESAMPLE_ATTEMPTS {
                    break (v, values);
                }
                tracing::debug!(projection = i, "zero-variance projection resampled");
            };
            histograms.push(Histogram::build(&values));
            projections.push(v);
        }
        Ok(LodaModel {
            version: MODEL_VERSION,
            seed,
            projections,
            histograms,
            trained_on: benign.len(),
        })
    }

    pub fn k(&self) -> usize {
        self.projections.len()
    }

    /// `-(1/k) sum_i ln P[v_i . z]`.
    pub fn score(&self, z: &[f64; FEATURE_DIM]) -> f64 {
        let total: f64 = self
            .projections
            .iter()
            .zip(&self.histograms)
            .map(|(v, h)| -h.probability(dot(v, z)).ln())
            .sum();
        total / self.k() as f64
    }

    pub fn to_json(&self) -> Result<String, LodaError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, LodaError> {
        let m: LodaModel = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(LodaError::Version(m.version));
        }
        Ok(m)
    }
}

fn dot(a: &[f64; FEATURE_DIM], b: &[f64; FEATURE_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `H1` iff `f >= gamma`.
pub fn decide(f: f64, gamma: f64) -> Hypothesis {
    Hypothesis::from_flag(f >= gamma)
}

/// Threshold whose false-positive rate on `benign_scores` is at most
/// `target_fpr`, as low as possible.
pub fn calibrate_threshold(benign_scores: &[f64], target_fpr: f64) -> f64 {
    if benign_scores.is_empty() {
        return f64::INFINITY;
    }
    let mut s = benign_scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let n = s.len() as f64;
    let allowed = (target_fpr * n + 1e-9).floor() as usize;
    // scores strictly above the threshold are flagged; ties share a decision
    if allowed >= s.len() {
        return f64::NEG_INFINITY;
    }
    let candidate = s[allowed];
    next_up(candidate)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}
