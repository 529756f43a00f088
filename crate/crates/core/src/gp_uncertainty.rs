//! Residual uncertainty by ordinary kriging.
//!
//! The residual at the target time is estimated as `sum_i lambda_i x(t_i)`
//! with `sum_i lambda_i = 1`; the weights minimise the estimation variance,
//! which is the (w+1)x(w+1) Lagrangian system
//!
//! ```text
//! [ K  1 ] [lambda]   [k]
//! [ 1' 0 ] [  mu  ] = [1]
//! ```
//!
//! and the variance at the optimum is
//! `K(t,t) - 2 lambda' k + lambda' K lambda`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_frames::LocalPoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("no past residuals to krige from")]
    Empty,
    #[error("kriging system is singular")]
    Degenerate,
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
    Linear,
    Polynomial,
}

/// Covariance function of residuals over time.
///
/// Linear and polynomial kernels are not stationary; they are evaluated on
/// times relative to the prediction target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpKernel {
    pub kind: KernelKind,
    /// Seconds.
    pub length_scale: f64,
    /// m^2.
    pub signal_var: f64,
    /// m^2, added on the diagonal.
    pub nugget: f64,
    /// Exponent of the polynomial kernel.
    pub degree: u32,
}

impl GpKernel {
    pub fn squared_exponential(length_scale: f64, signal_var: f64, nugget: f64) -> Self {
        GpKernel {
            kind: KernelKind::SquaredExponential,
            length_scale,
            signal_var,
            nugget,
            degree: 2,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.length_scale > 0.0 && self.signal_var > 0.0 && self.nugget >= 0.0) {
            return Err(GpError::InvalidInput(format!("invalid kernel {self:?}")));
        }
        Ok(())
    }

    /// Covariance of two distinct observations at `a` and `b`, with `origin`
    /// the prediction target.
    pub fn cov(&self, a: f64, b: f64, origin: f64) -> f64 {
        let l = self.length_scale;
        match self.kind {
            KernelKind::SquaredExponential => {
                let d = (a - b) / l;
                self.signal_var * (-0.5 * d * d).exp()
            }
            KernelKind::Linear => self.signal_var * (1.0 + (a - origin) * (b - origin) / (l * l)),
            KernelKind::Polynomial => {
                self.signal_var * (1.0 + (a - origin) * (b - origin) / (l * l)).powi(self.degree as i32)
            }
        }
    }

    fn var(&self, a: f64, origin: f64) -> f64 {
        self.cov(a, a, origin) + self.nugget
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    pub lambda: Vec<f64>,
    /// Lagrange multiplier of the unbiasedness constraint.
    pub multiplier: f64,
    /// Estimation error variance, m^2.
    pub variance: f64,
}

/// Solves for the kriging weights of `times` predicting `target`.
pub fn gp_weights(times: &[f64], kernel: &GpKernel, target: f64) -> Result<KrigingWeights, GpError> {
    kernel.validate()?;
    let w = times.len();
    if w == 0 {
        return Err(GpError::Empty);
    }
    let mut a = DMatrix::zeros(w + 1, w + 1);
    let mut rhs = DVector::zeros(w + 1);
    for i in 0..w {
        for j in 0..w {
            a[(i, j)] = if i == j {
                kernel.var(times[i], target)
            } else {
                kernel.cov(times[i], times[j], target)
            };
        }
        a[(i, w)] = 1.0;
        a[(w, i)] = 1.0;
        rhs[i] = kernel.cov(times[i], target, target);
    }
    rhs[w] = 1.0;

    let lu = a.clone().lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let scale = a.amax().max(1.0);
    if diag.min() <= 1e-12 * scale {
        return Err(GpError::Degenerate);
    }
    let sol = lu.solve(&rhs).ok_or(GpError::Degenerate)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Degenerate);
    }
    let lambda: Vec<f64> = sol.rows(0, w).iter().copied().collect();
    let variance = kriging_variance(times, kernel, target, &lambda);
    let variance = if variance < 0.0 {
        tracing::warn!(variance, "negative kriging variance clamped to zero");
        0.0
    } else {
        variance
    };
    Ok(KrigingWeights {
        lambda,
        multiplier: sol[w],
        variance,
    })
}

/// Estimation variance `V[x_hat - x]` for arbitrary weights.
pub fn kriging_variance(times: &[f64], kernel: &GpKernel, target: f64, lambda: &[f64]) -> f64 {
    let mut v = kernel.var(target, target);
    for (i, (&ti, &li)) in times.iter().zip(lambda).enumerate() {
        v -= 2.0 * li * kernel.cov(ti, target, target);
        for (j, (&tj, &lj)) in times.iter().zip(lambda).enumerate() {
            let k = if i == j {
                kernel.var(ti, target)
            } else {
                kernel.cov(ti, tj, target)
            };
            v += li * lj * k;
        }
    }
    v
}

/// Residuals `x(t) = p_hat(t) - p(t)` of one source, in time order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualSeries {
    pub points: Vec<(f64, LocalPoint)>,
}

impl ResidualSeries {
    pub fn new(points: Vec<(f64, LocalPoint)>) -> Result<Self, GpError> {
        if points.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(GpError::InvalidInput("residual times must increase".into()));
        }
        if points.iter().any(|(t, x)| !t.is_finite() || !x.is_finite()) {
            return Err(GpError::InvalidInput("non-finite residual".into()));
        }
        Ok(ResidualSeries { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    /// Mean square per axis.
    pub fn mean_square(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        let (e, nn) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(e, n), (_, x)| (e + x.east * x.east, n + x.north * x.north));
        [e / n, nn / n]
    }
}

/// `sum_i lambda_i x(t_i)`.
pub fn estimate_residual(series: &ResidualSeries, lambda: &[f64]) -> Result<LocalPoint, GpError> {
    if series.len() != lambda.len() {
        return Err(GpError::InvalidInput(format!(
            "{} weights for {} residuals",
            lambda.len(),
            series.len()
        )));
    }
    Ok(series
        .points
        .iter()
        .zip(lambda)
        .fold(LocalPoint::ORIGIN, |acc, ((_, x), l)| acc + *x * *l))
}

/// Per-source Gaussian over position with diagonal covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: LocalPoint,
    /// Diagonal of the covariance, m^2.
    pub var: [f64; 2],
}

pub fn confidence_interval(mean: LocalPoint, err_var: [f64; 2], var_floor: f64) -> ConfidenceInterval {
    ConfidenceInterval {
        mean,
        var: [err_var[0].max(var_floor), err_var[1].max(var_floor)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub kernel: KernelKind,
    /// Seconds; `None` means a third of the window length.
    pub length_scale: Option<f64>,
    /// Nugget as a fraction of the signal variance.
    pub nugget_ratio: f64,
    /// m^2.
    pub var_floor: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            kernel: KernelKind::SquaredExponential,
            length_scale: None,
            nugget_ratio: 1e-6,
            var_floor: 0.01,
        }
    }
}

impl GpConfig {
    pub fn length_scale_for(&self, window: usize) -> f64 {
        self.length_scale.unwrap_or(window as f64 / 3.0).max(1e-3)
    }

    /// Unit-variance kernel; per-axis variances scale its result.
    pub fn unit_kernel(&self, window: usize) -> GpKernel {
        GpKernel {
            kind: self.kernel,
            length_scale: self.length_scale_for(window),
            signal_var: 1.0,
            nugget: self.nugget_ratio,
            degree: 2,
        }
    }
}

/// Kriged residual and its per-axis error variance at `target`.
///
/// The signal variance of each axis is the mean square of that axis's
/// residuals, so one linear solve serves both axes.
pub fn predict_residual(
    series: &ResidualSeries,
    cfg: &GpConfig,
    window: usize,
    target: f64,
) -> Result<(LocalPoint, [f64; 2]), GpError> {
    let kernel = cfg.unit_kernel(window);
    let kw = gp_weights(&series.times(), &kernel, target)?;
    let x_hat = estimate_residual(series, &kw.lambda)?;
    let s2 = series.mean_square();
    Ok((x_hat, [s2[0] * kw.variance, s2[1] * kw.variance]))
}

/// Picks the length scale with the smallest one-step-ahead squared
/// prediction error over the series.
pub fn cross_validate_length_scale(series: &ResidualSeries, cfg: &GpConfig, candidates: &[f64]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &ell in candidates {
        let kernel = GpKernel {
            length_scale: ell,
            ..cfg.unit_kernel(1)
        };
        let mut sse = 0.0;
        for k in 1..series.len() {
            let past = ResidualSeries {
                points: series.points[..k].to_vec(),
            };
            let (t, x) = series.points[k];
            let Ok(kw) = gp_weights(&past.times(), &kernel, t) else {
                continue;
            };
            if let Ok(xh) = estimate_residual(&past, &kw.lambda) {
                let d = xh - x;
                sse += d.east * d.east + d.north * d.north;
            }
        }
        if best.map_or(true, |(_, b)| sse < b) {
            best = Some((ell, sse));
        }
    }
    best.map(|(ell, _)| ell)
}
