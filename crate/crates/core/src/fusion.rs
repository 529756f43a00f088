//! Temporal and cross-source fusion of confidence intervals.
//!
//! Temporal fusion of one source is the distribution of the kernel-weighted
//! sum of its interval variables, which is again Gaussian. Cross-source
//! fusion is the normalised product of the per-source Gaussians, evaluated
//! per axis: precisions add and the mean is precision weighted.

use thiserror::Error;

use crate::geo_frames::LocalPoint;
use crate::gp_uncertainty::ConfidenceInterval;
use crate::motion_regression::loc_kernel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("no intervals to fuse")]
    Empty,
    #[error("no source is available")]
    NoInformation,
    #[error("{0}")]
    InvalidInput(String),
}

/// Gaussian with independent axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisGaussian {
    pub mean: LocalPoint,
    pub var: [f64; 2],
}

impl From<ConfidenceInterval> for AxisGaussian {
    fn from(ci: ConfidenceInterval) -> Self {
        AxisGaussian {
            mean: ci.mean,
            var: ci.var,
        }
    }
}

/// Normalised fusion weights `K(m, t')` for interval times `times`,
/// evaluated at `t`.
pub fn fusion_weights(times: &[f64], t: f64, kappa: f64) -> Vec<f64> {
    let raw: Vec<f64> = times.iter().map(|&ti| loc_kernel(ti - t, kappa)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.iter().map(|k| k / total).collect()
    } else {
        // every weight underflowed: fall back to the nearest interval
        let nearest = times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i);
        (0..times.len()).map(|i| if Some(i) == nearest { 1.0 } else { 0.0 }).collect()
    }
}

/// Distribution of `sum_i K_i I_i`: mean `sum K_i mu_i`, variance
/// `sum K_i^2 var_i` per axis.
pub fn temporal_fuse(intervals: &[ConfidenceInterval], weights: &[f64]) -> Result<AxisGaussian, FusionError> {
    if intervals.is_empty() {
        return Err(FusionError::Empty);
    }
    if intervals.len() != weights.len() {
        return Err(FusionError::InvalidInput(format!(
            "{} weights for {} intervals",
            weights.len(),
            intervals.len()
        )));
    }
    let mut mean = LocalPoint::ORIGIN;
    let mut var = [0.0; 2];
    for (ci, &k) in intervals.iter().zip(weights) {
        mean += ci.mean * k;
        var[0] += k * k * ci.var[0];
        var[1] += k * k * ci.var[1];
    }
    Ok(AxisGaussian { mean, var })
}

/// Fused mean `mu`, per-axis deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedStatistic {
    pub mu: LocalPoint,
    pub sigma: [f64; 2],
    /// Number of sources in the product.
    pub sources: usize,
}

impl FusedStatistic {
    /// `(sigma_e, sigma_n, mu_e - p0_e, mu_n - p0_n)`.
    pub fn feature_vector(&self, p0: LocalPoint) -> [f64; 4] {
        feature_vector(self, p0)
    }
}

/// Product of the per-source Gaussians, scaling constant dropped.
pub fn product_fuse(gaussians: &[AxisGaussian]) -> Result<FusedStatistic, FusionError> {
    if gaussians.is_empty() {
        return Err(FusionError::NoInformation);
    }
    let mut prec = [0.0; 2];
    let mut weighted = [0.0; 2];
    for g in gaussians {
        for axis in 0..2 {
            let v = g.var[axis];
            if !(v > 0.0) || !v.is_finite() {
                return Err(FusionError::InvalidInput(format!("variance {v} must be positive")));
            }
            prec[axis] += 1.0 / v;
            weighted[axis] += g.mean.axis(axis) / v;
        }
    }
    let var = [1.0 / prec[0], 1.0 / prec[1]];
    Ok(FusedStatistic {
        mu: LocalPoint::new(weighted[0] * var[0], weighted[1] * var[1]),
        sigma: [var[0].sqrt(), var[1].sqrt()],
        sources: gaussians.len(),
    })
}

pub fn feature_vector(fs: &FusedStatistic, p0: LocalPoint) -> [f64; 4] {
    let d = fs.mu - p0;
    [fs.sigma[0], fs.sigma[1], d.east, d.north]
}
