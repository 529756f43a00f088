//! Motion-assisted local polynomial regression.
//!
//! Each axis of a source's positions is fitted with a degree-`n` polynomial
//! in `tau = t' - t_ref` by kernel-weighted least squares, subject to box
//! constraints `|p_hat(t_j) - p_tilde(t_j)| <= eps_j` that tie the fit to a
//! dead-reckoned position. The kernel does not couple the axes, so the two
//! axes are solved as independent QPs.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_frames::{body_to_horizontal, LocalPoint};
use crate::qp::{self, QpError};
use crate::trace_model::{MotionSample, PositionSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("polynomial basis is rank deficient")]
    Degenerate,
    #[error("motion constraint at t={t} (axis {axis}) is infeasible")]
    Infeasible { t: f64, axis: usize },
    #[error("invalid regression config: {0}")]
    Config(String),
}

/// `exp(-kappa * offset^2)`.
pub fn loc_kernel(offset: f64, kappa: f64) -> f64 {
    (-kappa * offset * offset).exp()
}

/// Per-axis tolerance `sigma_v * dt + sigma_a * dt^2 / 2 + margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TolerancePolicy {
    /// Velocity noise scale, m/s.
    pub sigma_v: f64,
    /// Acceleration noise scale, m/s^2.
    pub sigma_a: f64,
    pub margin: f64,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        TolerancePolicy {
            sigma_v: 0.2,
            sigma_a: 0.5,
            margin: 1.0,
        }
    }
}

impl TolerancePolicy {
    pub fn epsilon(&self, dt: f64) -> f64 {
        let dt = dt.abs();
        self.sigma_v * dt + 0.5 * self.sigma_a * dt * dt + self.margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    /// Polynomial degree `n`, 1 to 3.
    pub degree: usize,
    /// Kernel parameter, 1/s^2.
    pub kappa: f64,
    pub tolerance: TolerancePolicy,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            degree: 2,
            kappa: 1.0,
            tolerance: TolerancePolicy::default(),
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<(), RegressionError> {
        if !(1..=3).contains(&self.degree) {
            return Err(RegressionError::Config(format!("degree {} not in 1..=3", self.degree)));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(RegressionError::Config(format!("kappa {} must be >= 0", self.kappa)));
        }
        let t = self.tolerance;
        if !(t.sigma_v >= 0.0 && t.sigma_a >= 0.0 && t.margin > 0.0) {
            return Err(RegressionError::Config("tolerance terms must be non-negative with a positive margin".into()));
        }
        Ok(())
    }

    pub fn min_samples(&self) -> usize {
        self.degree + 2
    }
}

/// Box constraint `|p_hat(t) - target| <= eps` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConstraint {
    pub t: f64,
    pub target: LocalPoint,
    pub eps: [f64; 2],
}

impl MotionConstraint {
    pub fn relaxed(self, factor: f64) -> Self {
        MotionConstraint {
            eps: [self.eps[0] * factor, self.eps[1] * factor],
            ..self
        }
    }
}

/// Polynomial coefficients `W`, row per axis, column `i` multiplying `tau^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs {
    pub w: [Vec<f64>; 2],
    pub t_ref: f64,
}

impl PolyCoeffs {
    pub fn degree(&self) -> usize {
        self.w[0].len() - 1
    }

    pub fn evaluate(&self, t: f64) -> LocalPoint {
        let b = basis(t - self.t_ref, self.degree());
        let dot = |w: &[f64]| w.iter().zip(&b).map(|(a, b)| a * b).sum::<f64>();
        LocalPoint::new(dot(&self.w[0]), dot(&self.w[1]))
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub coeffs: PolyCoeffs,
    /// Weighted squared error at the optimum, summed over axes.
    pub objective: f64,
    /// Whether any motion constraint is active.
    pub constrained: bool,
}

/// `[1, tau, ..., tau^n]`.
pub fn basis(tau: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut p = 1.0;
    for _ in 0..=n {
        out.push(p);
        p *= tau;
    }
    out
}

/// Propagates `prev` over `dt` with the motion sample taken at the start of
/// the step: `prev + R v dt + R a dt^2 / 2`, truncated to the plane.
///
/// A missing velocity is replaced by `fallback_v`, a world-frame velocity
/// (typically differenced from checked positions); a missing acceleration is
/// taken as zero.
pub fn dead_reckon(
    prev: LocalPoint,
    motion: &MotionSample,
    dt: f64,
    fallback_v: Vector3<f64>,
) -> Result<LocalPoint, RegressionError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(RegressionError::InvalidStep(dt));
    }
    let o = &motion.orientation;
    let v_term = match motion.v {
        Some(v) => body_to_horizontal(o, &v),
        None => LocalPoint::from_enu(&fallback_v),
    };
    let a_term = motion
        .a
        .map(|a| body_to_horizontal(o, &a))
        .unwrap_or(LocalPoint::ORIGIN);
    Ok(prev + v_term * dt + a_term * (0.5 * dt * dt))
}

/// Kernel-weighted squared error of `coeffs` over `window`, centred at `t`.
pub fn objective(coeffs: &PolyCoeffs, window: &[PositionSample], t: f64, kappa: f64) -> f64 {
    window
        .iter()
        .map(|s| {
            let r = coeffs.evaluate(s.t) - s.pos;
            loc_kernel(s.t - t, kappa) * (r.east * r.east + r.north * r.north)
        })
        .sum()
}

/// Normal matrix `sum_i K_i b_i b_i'` of one axis (the objective Hessian up
/// to a factor of two) and the matching linear terms for both axes.
pub fn normal_equations(
    window: &[PositionSample],
    t: f64,
    kappa: f64,
    degree: usize,
) -> (DMatrix<f64>, [DVector<f64>; 2]) {
    let k = degree + 1;
    let mut g = DMatrix::zeros(k, k);
    let mut rhs = [DVector::zeros(k), DVector::zeros(k)];
    for s in window {
        let wt = loc_kernel(s.t - t, kappa);
        let b = DVector::from_vec(basis(s.t - t, degree));
        g += &b * b.transpose() * wt;
        rhs[0] += &b * (wt * s.pos.east);
        rhs[1] += &b * (wt * s.pos.north);
    }
    (g, rhs)
}

/// Fits the window around target time `t` (which is also the basis origin).
pub fn fit(
    window: &[PositionSample],
    constraints: &[MotionConstraint],
    cfg: &RegressionConfig,
    t: f64,
) -> Result<Fit, RegressionError> {
    cfg.validate()?;
    let n = cfg.degree;
    if window.len() < cfg.min_samples() {
        return Err(RegressionError::TooFewSamples {
            needed: cfg.min_samples(),
            got: window.len(),
        });
    }
    let (g, rhs) = normal_equations(window, t, cfg.kappa, n);
    // normalise so that far-away samples do not make the problem look singular
    let scale = g.amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(RegressionError::Degenerate);
    }
    let gs = &g / scale;
    let eig = gs.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-13 * hi) {
        return Err(RegressionError::Degenerate);
    }

    let mut w = [Vec::new(), Vec::new()];
    let mut constrained = false;
    for axis in 0..2 {
        let a = -(&rhs[axis] / scale);
        let mut c = DMatrix::zeros(2 * constraints.len(), n + 1);
        let mut b = DVector::zeros(2 * constraints.len());
        for (j, con) in constraints.iter().enumerate() {
            let row = basis(con.t - t, n);
            let target = con.target.axis(axis);
            let eps = con.eps[axis];
            for (i, v) in row.iter().enumerate() {
                c[(2 * j, i)] = *v;
                c[(2 * j + 1, i)] = -*v;
            }
            b[2 * j] = target - eps;
            b[2 * j + 1] = -(target + eps);
        }
        let sol = qp::solve(&gs, &a, &c, &b).map_err(|e| match e {
            QpError::Infeasible(j) => RegressionError::Infeasible {
                t: constraints[j / 2].t,
                axis,
            },
            QpError::NotConvex | QpError::IterationLimit => RegressionError::Degenerate,
        })?;
        constrained |= !sol.active.is_empty();
        w[axis] = sol.x.iter().copied().collect();
    }
    let coeffs = PolyCoeffs { w, t_ref: t };
    let objective = objective(&coeffs, window, t, cfg.kappa);
    Ok(Fit {
        coeffs,
        objective,
        constrained,
    })
}

/// [`fit`], retrying once with every tolerance doubled if the constraints are
/// infeasible.
pub fn fit_relaxed(
    window: &[PositionSample],
    constraints: &[MotionConstraint],
    cfg: &RegressionConfig,
    t: f64,
) -> Result<Fit, RegressionError> {
    match fit(window, constraints, cfg, t) {
        Err(RegressionError::Infeasible { t: bad, axis }) => {
            tracing::warn!(t = bad, axis, "motion constraints infeasible, doubling tolerance");
            let relaxed: Vec<_> = constraints.iter().map(|c| c.relaxed(2.0)).collect();
            fit(window, &relaxed, cfg, t)
        }
        other => other,
    }
}
