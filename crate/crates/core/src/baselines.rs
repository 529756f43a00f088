//! Comparison detectors: RSS-weighted station centroid, a GNSS/IMU Kalman
//! filter, a particle filter, and a combined generalised likelihood ratio
//! test over network positions.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_frames::{body_to_horizontal, LocalPoint};
use crate::motion_regression::dead_reckon;
use crate::trace_model::{Hypothesis, MotionSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("station observation has no usable weight")]
    DegenerateObservation,
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("filter covariance lost positive definiteness")]
    NumericalFailure,
    #[error("{0}")]
    InvalidInput(String),
}

/// `H1` iff `distance > threshold`.
pub fn distance_detect(distance: f64, threshold: f64) -> Hypothesis {
    Hypothesis::from_flag(distance > threshold)
}

// ---------------------------------------------------------------------------
// Station centroid

#[derive(Debug, Clone, PartialEq)]
pub struct StationObservation {
    pub positions: Vec<LocalPoint>,
    pub rss_dbm: Vec<f64>,
}

/// Centroid of the stations weighted by received power in milliwatts.
pub fn sop_centroid(obs: &StationObservation) -> Result<LocalPoint, BaselineError> {
    if obs.positions.is_empty() || obs.positions.len() != obs.rss_dbm.len() {
        return Err(BaselineError::InvalidInput(format!(
            "{} stations with {} RSS values",
            obs.positions.len(),
            obs.rss_dbm.len()
        )));
    }
    let weights: Vec<f64> = obs.rss_dbm.iter().map(|r| 10f64.powf(r / 10.0)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(BaselineError::DegenerateObservation);
    }
    Ok(obs
        .positions
        .iter()
        .zip(&weights)
        .fold(LocalPoint::ORIGIN, |acc, (p, w)| acc + *p * (w / total)))
}

// ---------------------------------------------------------------------------
// Kalman filter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    /// GNSS position noise variance, m^2.
    pub meas_var: f64,
    /// Acceleration noise variance driving the process, (m/s^2)^2.
    pub accel_var: f64,
    pub init_pos_var: f64,
    pub init_vel_var: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            meas_var: 9.0,
            accel_var: 0.25,
            init_pos_var: 25.0,
            init_vel_var: 100.0,
        }
    }
}

/// Position/velocity state in the local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

impl FilterState {
    pub fn position(&self) -> LocalPoint {
        LocalPoint::new(self.x[0], self.x[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfOutput {
    /// GNSS minus predicted position, before the update.
    pub innovation: Option<LocalPoint>,
    pub estimate: LocalPoint,
}

#[derive(Debug, Clone)]
pub struct KalmanFilter {
    pub cfg: KalmanConfig,
    pub state: FilterState,
}

impl KalmanFilter {
    pub fn new(start: LocalPoint, cfg: KalmanConfig) -> Self {
        let mut p = Matrix4::zeros();
        p[(0, 0)] = cfg.init_pos_var;
        p[(1, 1)] = cfg.init_pos_var;
        p[(2, 2)] = cfg.init_vel_var;
        p[(3, 3)] = cfg.init_vel_var;
        KalmanFilter {
            cfg,
            state: FilterState {
                x: Vector4::new(start.east, start.north, 0.0, 0.0),
                p,
            },
        }
    }

    /// Constant-velocity prediction driven by the world-frame acceleration of
    /// `imu`, then a GNSS position update.
    pub fn step(&mut self, imu: Option<&MotionSample>, gnss: Option<LocalPoint>, dt: f64) -> Result<KfOutput, BaselineError> {
        if !(dt > 0.0) {
            return Err(BaselineError::InvalidStep(dt));
        }
        let accel = imu
            .and_then(|m| m.a.map(|a| body_to_horizontal(&m.orientation, &a)))
            .unwrap_or(LocalPoint::ORIGIN);
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let g = Matrix4x2::new(0.5 * dt * dt, 0.0, 0.0, 0.5 * dt * dt, dt, 0.0, 0.0, dt);
        let u = Vector2::new(accel.east, accel.north);
        let s = &mut self.state;
        s.x = f * s.x + g * u;
        s.p = f * s.p * f.transpose() + g * g.transpose() * self.cfg.accel_var;

        let mut innovation = None;
        if let Some(z) = gnss {
            let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
            let r = Matrix2::identity() * self.cfg.meas_var;
            let y = Vector2::new(z.east, z.north) - h * s.x;
            let sm = h * s.p * h.transpose() + r;
            let sinv = sm.try_inverse().ok_or(BaselineError::NumericalFailure)?;
            let k = s.p * h.transpose() * sinv;
            s.x += k * y;
            // Joseph form keeps the covariance symmetric positive semi-definite
            let ikh = Matrix4::identity() - k * h;
            s.p = ikh * s.p * ikh.transpose() + k * r * k.transpose();
            innovation = Some(LocalPoint::new(y[0], y[1]));
        }
        s.p = 0.5 * (s.p + s.p.transpose());
        if s.p.cholesky().is_none() {
            return Err(BaselineError::NumericalFailure);
        }
        Ok(KfOutput {
            innovation,
            estimate: s.position(),
        })
    }
}

// ---------------------------------------------------------------------------
// Particle filter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleConfig {
    pub particles: usize,
    /// Per-axis propagation jitter, m.
    pub jitter: f64,
    /// GNSS likelihood standard deviation, m.
    pub meas_std: f64,
    /// Half-width of the initial uniform spread, m.
    pub init_spread: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        ParticleConfig {
            particles: 500,
            jitter: 0.5,
            meas_std: 3.0,
            init_spread: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParticleFilter {
    pub cfg: ParticleConfig,
    pub particles: Vec<LocalPoint>,
    pub weights: Vec<f64>,
    rng: ChaCha8Rng,
    estimate: LocalPoint,
}

impl ParticleFilter {
    pub fn new(start: LocalPoint, cfg: ParticleConfig, seed: u64) -> Result<Self, BaselineError> {
        if cfg.particles < 100 {
            return Err(BaselineError::InvalidInput(format!("{} particles, need at least 100", cfg.particles)));
        }
        let mut pf = ParticleFilter {
            cfg,
            particles: Vec::new(),
            weights: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            estimate: start,
        };
        pf.scatter(start);
        Ok(pf)
    }

    fn scatter(&mut self, around: LocalPoint) {
        let r = self.cfg.init_spread;
        let n = self.cfg.particles;
        self.particles = (0..n)
            .map(|_| around + LocalPoint::new(self.rng.random_range(-r..=r), self.rng.random_range(-r..=r)))
            .collect();
        self.weights = vec![1.0 / n as f64; n];
    }

    pub fn estimate(&self) -> LocalPoint {
        self.estimate
    }

    pub fn effective_sample_size(&self) -> f64 {
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        if s2 > 0.0 {
            1.0 / s2
        } else {
            0.0
        }
    }

    /// Propagates by dead reckoning plus jitter, reweights by the GNSS
    /// likelihood and resamples when the effective sample size drops below
    /// half. Returns the weighted-mean estimate.
    pub fn step(
        &mut self,
        imu: Option<&MotionSample>,
        gnss: Option<LocalPoint>,
        dt: f64,
        fallback_v: Vector3<f64>,
    ) -> Result<LocalPoint, BaselineError> {
        if !(dt > 0.0) {
            return Err(BaselineError::InvalidStep(dt));
        }
        let shift = match imu {
            Some(m) => dead_reckon(LocalPoint::ORIGIN, m, dt, fallback_v).map_err(|_| BaselineError::InvalidStep(dt))?,
            None => LocalPoint::from_enu(&(fallback_v * dt)),
        };
        let jitter = Normal::new(0.0, self.cfg.jitter.max(1e-12)).expect("positive jitter");
        for p in &mut self.particles {
            *p += shift + LocalPoint::new(jitter.sample(&mut self.rng), jitter.sample(&mut self.rng));
        }
        if let Some(z) = gnss {
            let inv = 1.0 / (2.0 * self.cfg.meas_std * self.cfg.meas_std);
            // log-domain weights avoid underflow when GNSS is far away
            let logs: Vec<f64> = self
                .particles
                .iter()
                .zip(&self.weights)
                .map(|(p, w)| w.ln() - (*p - z).norm().powi(2) * inv)
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                tracing::warn!("particle weights collapsed, reinitialising");
                let at = self.estimate;
                self.scatter(at);
            } else {
                let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                self.weights = w;
            }
        }
        if self.effective_sample_size() < 0.5 * self.particles.len() as f64 {
            self.resample();
        }
        self.estimate = self
            .particles
            .iter()
            .zip(&self.weights)
            .fold(LocalPoint::ORIGIN, |acc, (p, w)| acc + *p * *w);
        Ok(self.estimate)
    }

    fn resample(&mut self) {
        let n = self.particles.len();
        let u0: f64 = self.rng.random::<f64>() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut i = 0;
        for j in 0..n {
            let u = u0 + j as f64 / n as f64;
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.weights[i];
            }
            out.push(self.particles[i]);
        }
        self.particles = out;
        self.weights = vec![1.0 / n as f64; n];
    }
}

// ---------------------------------------------------------------------------
// Combined likelihood ratio test

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlrtStatistic {
    /// `sum_m log Lambda_m`.
    pub log_lambda: f64,
    /// Degrees of freedom, two per contributing source.
    pub dof: usize,
}

impl GlrtStatistic {
    /// `-2 log Lambda`, chi-square distributed with `dof` degrees of freedom
    /// under the benign hypothesis.
    pub fn chi2(&self) -> f64 {
        -2.0 * self.log_lambda
    }

    /// `-ln P[chi2_dof >= statistic]`; flags at `-ln(target_fpr)`.
    pub fn surprise(&self) -> f64 {
        -chi2_log_sf(self.chi2(), self.dof)
    }
}

/// Sums `-1/2 |p0 - p_m|^2` in the metric of each source's diagonal
/// covariance. Sources with a non-positive variance are skipped.
pub fn glrt_combine(p0: LocalPoint, sources: &[(LocalPoint, [f64; 2])]) -> GlrtStatistic {
    let mut log_lambda = 0.0;
    let mut dof = 0;
    for (p, var) in sources {
        if !(var[0] > 0.0 && var[1] > 0.0) {
            tracing::warn!(?var, "singular source covariance skipped");
            continue;
        }
        let d = p0 - *p;
        log_lambda -= 0.5 * (d.east * d.east / var[0] + d.north * d.north / var[1]);
        dof += 2;
    }
    GlrtStatistic { log_lambda, dof }
}

/// `ln P[X >= x]` for a chi-square variable with even `dof`:
/// `-x/2 + ln sum_{i < dof/2} (x/2)^i / i!`.
pub fn chi2_log_sf(x: f64, dof: usize) -> f64 {
    if dof == 0 || x <= 0.0 {
        return 0.0;
    }
    debug_assert!(dof % 2 == 0);
    let h = 0.5 * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..dof / 2 {
        term *= h / i as f64;
        sum += term;
    }
    -h + sum.ln()
}

/// Draws a standard normal; shared by tests that need noise with this RNG.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo_frames::Orientation;

    fn still() -> MotionSample {
        MotionSample {
            t: 0.0,
            v: Some(Vector3::zeros()),
            a: Some(Vector3::zeros()),
            orientation: Orientation::yaw_only(0.0),
        }
    }

    #[test]
    fn centroid_cases() {
        let a = LocalPoint::new(0.0, 0.0);
        let b = LocalPoint::new(10.0, 0.0);
        let mid = sop_centroid(&StationObservation {
            positions: vec![a, b],
            rss_dbm: vec![-70.0, -70.0],
        })
        .unwrap();
        assert!((mid - LocalPoint::new(5.0, 0.0)).norm() < 1e-12);
        let one = sop_centroid(&StationObservation {
            positions: vec![b],
            rss_dbm: vec![-90.0],
        })
        .unwrap();
        assert!((one - b).norm() < 1e-12);
        let c = LocalPoint::new(0.0, 10.0);
        let three = sop_centroid(&StationObservation {
            positions: vec![a, b, c],
            rss_dbm: vec![-50.0, -60.0, -60.0],
        })
        .unwrap();
        // weights 1e-5, 1e-6, 1e-6 mW
        let (w1, w2, w3) = (1e-5, 1e-6, 1e-6);
        let s = w1 + w2 + w3;
        assert!((three.east - 10.0 * w2 / s).abs() < 1e-9);
        assert!((three.north - 10.0 * w3 / s).abs() < 1e-9);
        assert!(sop_centroid(&StationObservation {
            positions: vec![a],
            rss_dbm: vec![f64::NEG_INFINITY],
        })
        .is_err());
    }

    #[test]
    fn kalman_converges_on_stationary_truth() {
        let truth = LocalPoint::new(5.0, -3.0);
        let cfg = KalmanConfig {
            meas_var: 1e-6,
            accel_var: 1e-9,
            ..Default::default()
        };
        let mut kf = KalmanFilter::new(LocalPoint::ORIGIN, cfg);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let out = kf.step(Some(&still()), Some(truth), 1.0).unwrap();
            last = out.innovation.unwrap().norm();
        }
        assert!(last < 1e-3);
        assert!((kf.state.position() - truth).norm() < 1e-3);
    }

    #[test]
    fn kalman_innovation_sees_a_jump() {
        let mut kf = KalmanFilter::new(LocalPoint::ORIGIN, KalmanConfig {
            accel_var: 1e-4,
            ..Default::default()
        });
        for _ in 0..100 {
            kf.step(Some(&still()), Some(LocalPoint::ORIGIN), 1.0).unwrap();
        }
        let out = kf.step(Some(&still()), Some(LocalPoint::new(100.0, 0.0)), 1.0).unwrap();
        assert!((out.innovation.unwrap().norm() - 100.0).abs() < 1.0);
    }

    #[test]
    fn kalman_covariance_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut kf = KalmanFilter::new(LocalPoint::ORIGIN, KalmanConfig::default());
        for _ in 0..1000 {
            let m = MotionSample {
                t: 0.0,
                v: None,
                a: Some(Vector3::new(standard_normal(&mut rng), standard_normal(&mut rng), 0.0)),
                orientation: Orientation::yaw_only(rng.random_range(-3.0..3.0)),
            };
            let z = (rng.random::<f64>() < 0.8).then(|| LocalPoint::new(standard_normal(&mut rng) * 50.0, 0.0));
            kf.step(Some(&m), z, rng.random_range(0.1..2.0)).unwrap();
            let p = kf.state.p;
            assert!((p - p.transpose()).amax() < 1e-9);
            assert!(p.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn particle_filter_tracks_and_is_reproducible() {
        let truth = LocalPoint::new(2.0, 1.0);
        let run = || {
            let mut pf = ParticleFilter::new(truth, ParticleConfig::default(), 11).unwrap();
            (0..30)
                .map(|_| pf.step(Some(&still()), Some(truth), 1.0, Vector3::zeros()).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!((a.last().unwrap().distance(truth)) < 1.0);
        let pf = ParticleFilter::new(truth, ParticleConfig::default(), 1).unwrap();
        assert!(pf.effective_sample_size().is_finite());
        assert!(ParticleFilter::new(truth, ParticleConfig { particles: 10, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn particle_filter_lags_a_jump() {
        let mut pf = ParticleFilter::new(LocalPoint::ORIGIN, ParticleConfig::default(), 3).unwrap();
        for _ in 0..20 {
            pf.step(Some(&still()), Some(LocalPoint::ORIGIN), 1.0, Vector3::zeros()).unwrap();
        }
        let jump = LocalPoint::new(100.0, 0.0);
        let est = pf.step(Some(&still()), Some(jump), 1.0, Vector3::zeros()).unwrap();
        assert!(est.distance(jump) > 10.0);
    }

    #[test]
    fn glrt_cases() {
        let p0 = LocalPoint::new(3.0, 4.0);
        assert_eq!(glrt_combine(p0, &[(p0, [1.0, 1.0])]).log_lambda, 0.0);
        let one = glrt_combine(p0, &[(LocalPoint::ORIGIN, [1.0, 1.0])]);
        assert!((one.log_lambda + 12.5).abs() < 1e-12);
        let two = glrt_combine(p0, &[(LocalPoint::ORIGIN, [1.0, 1.0]), (LocalPoint::ORIGIN, [1.0, 1.0])]);
        assert!((two.chi2() - 2.0 * one.chi2()).abs() < 1e-12);
        assert_eq!(two.dof, 4);
        let skipped = glrt_combine(p0, &[(LocalPoint::ORIGIN, [0.0, 1.0])]);
        assert_eq!(skipped.dof, 0);
    }

    #[test]
    fn chi2_tail_matches_closed_forms() {
        // dof 2: sf = exp(-x/2)
        assert!((chi2_log_sf(3.0, 2) + 1.5).abs() < 1e-15);
        // dof 4: sf = exp(-x/2) (1 + x/2)
        assert!((chi2_log_sf(3.0, 4) - (-1.5 + 2.5f64.ln())).abs() < 1e-15);
        assert_eq!(chi2_log_sf(0.0, 4), 0.0);
    }

    #[test]
    fn distance_threshold() {
        assert_eq!(distance_detect(10.0, 10.0), Hypothesis::H0);
        assert_eq!(distance_detect(10.1, 10.0), Hypothesis::H1);
    }
}
