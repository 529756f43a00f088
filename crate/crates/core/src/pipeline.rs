//! Per-epoch detection loop: per-source motion-constrained regression and
//! kriged uncertainty, temporal and cross-source fusion, Loda scoring and
//! GNSS screening.
//!
//! Each epoch is judged from the window of earlier epochs only; the current
//! GNSS fix is the sample under test. Every source keeps a chain of its own
//! estimates: the motion constraint at `t` is centred on the estimate at
//! `t - 1` moved by the dead-reckoned displacement, and the residuals that
//! feed the kriging are the differences between those chained predictions
//! and the fixes that later arrived.

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fusion_weights, product_fuse, temporal_fuse, AxisGaussian, FusedStatistic};
use crate::geo_frames::LocalPoint;
use crate::gp_uncertainty::{confidence_interval, predict_residual, ConfidenceInterval, GpConfig, ResidualSeries};
use crate::loda_detector::{calibrate_threshold, decide, LodaError, LodaModel, FEATURE_DIM};
use crate::metrics::EpochOutcome;
use crate::motion_regression::{dead_reckon, fit_relaxed, MotionConstraint, RegressionConfig, RegressionError};
use crate::trace_model::{EpochData, Hypothesis, MotionSample, Trace, TraceError, WindowBuffer, GNSS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("not enough benign epochs to train: {0}")]
    Training(#[from] LodaError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Network and GNSS sources, no motion data.
    #[serde(rename = "pads-n")]
    N,
    /// GNSS only, with motion constraints.
    #[serde(rename = "pads-o")]
    O,
    /// Everything.
    #[serde(rename = "pads-a")]
    A,
}

impl Variant {
    pub fn uses_motion(self) -> bool {
        matches!(self, Variant::O | Variant::A)
    }

    pub fn sources(self, network_sources: usize) -> Vec<usize> {
        match self {
            Variant::O => vec![GNSS],
            Variant::N | Variant::A => (0..=network_sources).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::N => "pads-n",
            Variant::O => "pads-o",
            Variant::A => "pads-a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Window length `w` in epochs.
    pub window: usize,
    pub regression: RegressionConfig,
    pub gp: GpConfig,
    /// Loda projections `k`.
    pub projections: usize,
    pub seed: u64,
    /// False-positive rate the threshold is calibrated to.
    pub target_fpr: f64,
    /// Fraction of the benign training features used to fit Loda; the rest
    /// calibrates the threshold.
    pub fit_fraction: f64,
    /// Fraction of a trace's pre-attack span used for training when no
    /// separate benign trace is given.
    pub prefix_fraction: f64,
    /// Move past intervals to the current epoch with the dead-reckoned
    /// displacement before temporal fusion. Off by default: it removes the
    /// lag that makes wide kernels costly, which flattens the kappa trade-off.
    pub motion_compensation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 15,
            regression: RegressionConfig::default(),
            gp: GpConfig::default(),
            projections: 100,
            seed: 7,
            target_fpr: 0.1,
            fit_fraction: 0.6,
            prefix_fraction: 1.0,
            motion_compensation: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(2..=200).contains(&self.window) {
            return Err(PipelineError::Config(format!("window {} not in 2..=200", self.window)));
        }
        self.regression
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.projections == 0 {
            return Err(PipelineError::Config("need at least one projection".into()));
        }
        for (name, v) in [
            ("target_fpr", self.target_fpr),
            ("fit_fraction", self.fit_fraction),
            ("prefix_fraction", self.prefix_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!("{name} {v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Outcome of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub hypothesis: Hypothesis,
    pub score: f64,
    /// Fused mean `mu(t)`; NaN when no source was usable.
    pub recovered: LocalPoint,
    pub features: Option<[f64; FEATURE_DIM]>,
    /// Window still filling, no source, or no GNSS fix: the decision
    /// defaults to `H0`.
    pub degraded: bool,
    pub sources: usize,
}

/// One interval in a source's chain.
#[derive(Debug, Clone, Copy)]
struct Link {
    t: f64,
    ci: ConfidenceInterval,
}

#[derive(Debug, Clone, Default)]
struct SourceTrack {
    links: VecDeque<Link>,
}

impl SourceTrack {
    fn last(&self) -> Option<&Link> {
        self.links.back()
    }

    fn at(&self, t: f64) -> Option<&Link> {
        self.links.iter().rev().find(|l| l.t == t)
    }
}

/// The stateful detector for one trace.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: PipelineConfig,
    variant: Variant,
    model: Option<LodaModel>,
    gamma: f64,
    sources: Vec<usize>,
    buffer: WindowBuffer,
    tracks: Vec<SourceTrack>,
    last_t: Option<f64>,
    last_motion: Option<MotionSample>,
    /// Cumulative dead-reckoned displacement at each recent epoch.
    odometry: VecDeque<(f64, LocalPoint)>,
    recovered: VecDeque<(f64, LocalPoint)>,
}

impl Detector {
    /// Without a model every epoch is decided `H0` and only features are
    /// produced.
    pub fn new(
        cfg: &PipelineConfig,
        variant: Variant,
        network_sources: usize,
        model: Option<LodaModel>,
        gamma: f64,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let total = network_sources + 1;
        Ok(Detector {
            cfg: cfg.clone(),
            variant,
            model,
            gamma,
            sources: variant.sources(network_sources),
            buffer: WindowBuffer::new(cfg.window, total),
            tracks: vec![SourceTrack::default(); total],
            last_t: None,
            last_motion: None,
            odometry: VecDeque::new(),
            recovered: VecDeque::new(),
        })
    }

    fn fallback_velocity(&self) -> Vector3<f64> {
        let mut it = self.recovered.iter().rev();
        match (it.next(), it.next()) {
            (Some(&(t1, p1)), Some(&(t0, p0))) if t1 > t0 => {
                let v = (p1 - p0) * (1.0 / (t1 - t0));
                Vector3::new(v.east, v.north, 0.0)
            }
            _ => Vector3::zeros(),
        }
    }

    fn odometry_at(&self, t: f64) -> Option<LocalPoint> {
        self.odometry.iter().rev().find(|o| o.0 == t).map(|o| o.1)
    }

    /// Interval of source `m` at `t`, or `None` when the source has nothing
    /// usable.
    fn source_interval(&self, m: usize, t: f64, step: Option<(f64, LocalPoint)>) -> Option<ConfidenceInterval> {
        let window = self.buffer.window_view(m).ok()?;
        let track = &self.tracks[m];
        let constraint = match (step, track.last()) {
            (Some((dt, disp)), Some(prev)) => {
                let eps = self.cfg.regression.tolerance.epsilon(dt);
                Some((
                    MotionConstraint {
                        t,
                        target: prev.ci.mean + disp,
                        eps: [eps, eps],
                    },
                    prev.ci.var,
                ))
            }
            _ => None,
        };
        let cons: Vec<MotionConstraint> = constraint.iter().map(|c| c.0).collect();
        let fit = fit_relaxed(&window, &cons, &self.cfg.regression, t);
        let mean = match &fit {
            Ok(f) => f.coeffs.evaluate(t),
            Err(RegressionError::TooFewSamples { .. } | RegressionError::Degenerate | RegressionError::Infeasible { .. }) => {
                // coast on dead reckoning, growing the variance
                let (c, var) = constraint?;
                let e2 = c.eps[0] * c.eps[0];
                return Some(ConfidenceInterval {
                    mean: c.target,
                    var: [var[0] + e2, var[1] + e2],
                });
            }
            Err(e) => {
                tracing::debug!(source = m, t, error = %e, "regression failed");
                return None;
            }
        };
        let fit = fit.ok()?;
        // predictive residuals where the chain has a prediction, else the
        // in-sample residuals of this fit
        let predictive: Vec<(f64, LocalPoint)> = window
            .iter()
            .filter_map(|s| track.at(s.t).map(|l| (s.t, l.ci.mean - s.pos)))
            .collect();
        let points = if predictive.is_empty() {
            window.iter().map(|s| (s.t, fit.coeffs.evaluate(s.t) - s.pos)).collect()
        } else {
            predictive
        };
        let series = ResidualSeries::new(points).ok()?;
        let (_, var) = predict_residual(&series, &self.cfg.gp, self.cfg.window, t).ok()?;
        Some(confidence_interval(mean, var, self.cfg.gp.var_floor))
    }

    /// Decides the epoch, then admits it to the window.
    pub fn step(&mut self, epoch: &EpochData) -> Result<Decision, PipelineError> {
        let t = epoch.t;
        let dt = self.last_t.map(|lt| t - lt);
        let step = match (self.variant.uses_motion(), dt, self.last_motion.as_ref()) {
            (true, Some(dt), Some(m)) if dt > 0.0 => dead_reckon(LocalPoint::ORIGIN, m, dt, self.fallback_velocity())
                .ok()
                .map(|d| (dt, d)),
            _ => None,
        };
        let base = self.odometry.back().map(|o| o.1).unwrap_or(LocalPoint::ORIGIN);
        let here = base + step.map(|s| s.1).unwrap_or(LocalPoint::ORIGIN);
        self.odometry.push_back((t, here));

        let horizon = t - self.cfg.window as f64 - 0.5;
        let compensate = self.cfg.motion_compensation && self.variant.uses_motion();
        let mut fused_inputs: Vec<AxisGaussian> = Vec::new();
        for &m in &self.sources.clone() {
            let Some(ci) = self.source_interval(m, t, step) else {
                continue;
            };
            let track = &mut self.tracks[m];
            track.links.push_back(Link { t, ci });
            while track.links.front().is_some_and(|l| l.t < horizon) {
                track.links.pop_front();
            }
            let links: Vec<Link> = track.links.iter().copied().collect();
            let times: Vec<f64> = links.iter().map(|l| l.t).collect();
            let weights = fusion_weights(&times, t, self.cfg.regression.kappa);
            let intervals: Vec<ConfidenceInterval> = links
                .iter()
                .map(|l| {
                    let shift = match (compensate, self.odometry_at(l.t)) {
                        (true, Some(o)) => here - o,
                        _ => LocalPoint::ORIGIN,
                    };
                    ConfidenceInterval {
                        mean: l.ci.mean + shift,
                        var: l.ci.var,
                    }
                })
                .collect();
            if let Ok(g) = temporal_fuse(&intervals, &weights) {
                fused_inputs.push(g);
            }
        }
        while self.odometry.front().is_some_and(|o| o.0 < horizon) {
            self.odometry.pop_front();
        }

        let fused: Option<FusedStatistic> = product_fuse(&fused_inputs).ok();
        // no decisions until the window has filled once
        let warm = self.buffer.len() == self.buffer.capacity();
        let decision = match (fused, epoch.gnss) {
            (Some(fs), Some(p0)) if warm => {
                let z = fs.feature_vector(p0);
                let (score, hypothesis) = match &self.model {
                    Some(model) => {
                        let f = model.score(&z);
                        (f, decide(f, self.gamma))
                    }
                    None => (0.0, Hypothesis::H0),
                };
                Decision {
                    hypothesis,
                    score,
                    recovered: fs.mu,
                    features: Some(z),
                    degraded: false,
                    sources: fs.sources,
                }
            }
            (fused, _) => Decision {
                hypothesis: Hypothesis::H0,
                score: 0.0,
                recovered: fused.map(|f| f.mu).unwrap_or(LocalPoint::new(f64::NAN, f64::NAN)),
                features: None,
                degraded: true,
                sources: fused.map(|f| f.sources).unwrap_or(0),
            },
        };

        if decision.recovered.is_finite() {
            self.recovered.push_back((t, decision.recovered));
            if self.recovered.len() > 2 {
                self.recovered.pop_front();
            }
        }
        self.buffer.push_epoch(epoch, decision.hypothesis)?;
        self.last_t = Some(t);
        self.last_motion = epoch.motion;
        Ok(decision)
    }
}

/// Convenience wrapper for a single decision on a prepared detector.
pub fn detect_epoch(detector: &mut Detector, epoch: &EpochData) -> Result<Decision, PipelineError> {
    detector.step(epoch)
}

pub fn outcome(epoch: &EpochData, d: &Decision) -> EpochOutcome {
    EpochOutcome {
        t: epoch.t,
        truth: Hypothesis::from_flag(epoch.attacked),
        decision: d.hypothesis,
        score: d.score,
        recovered: d.recovered,
        truth_pos: epoch.truth,
    }
}

/// Runs a trained detector over every epoch of `trace`.
pub fn run_trace(
    trace: &Trace,
    variant: Variant,
    cfg: &PipelineConfig,
    model: &LodaModel,
    gamma: f64,
) -> Result<Vec<EpochOutcome>, PipelineError> {
    let mut det = Detector::new(cfg, variant, trace.network_sources, Some(model.clone()), gamma)?;
    trace
        .epochs()
        .iter()
        .map(|e| det.step(e).map(|d| outcome(e, &d)))
        .collect()
}

/// Features of the first `limit` epochs with screening inert.
pub fn benign_features(
    trace: &Trace,
    variant: Variant,
    cfg: &PipelineConfig,
    limit: usize,
) -> Result<Vec<[f64; FEATURE_DIM]>, PipelineError> {
    let mut det = Detector::new(cfg, variant, trace.network_sources, None, f64::INFINITY)?;
    let mut out = Vec::new();
    for e in trace.epochs().iter().take(limit) {
        if let Some(z) = det.step(e)?.features {
            out.push(z);
        }
    }
    Ok(out)
}

/// A trained model and its operating threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: LodaModel,
    pub gamma: f64,
}

/// Fits Loda on the leading part of `features` and calibrates the threshold
/// on the rest.
pub fn train_on_features(features: &[[f64; FEATURE_DIM]], cfg: &PipelineConfig) -> Result<Trained, PipelineError> {
    let split = ((features.len() as f64) * cfg.fit_fraction).round() as usize;
    let (fit, held) = features.split_at(split.min(features.len()));
    let model = LodaModel::train(fit, cfg.projections, cfg.seed)?;
    let scores: Vec<f64> = if held.is_empty() { fit } else { held }.iter().map(|z| model.score(z)).collect();
    let gamma = calibrate_threshold(&scores, cfg.target_fpr);
    Ok(Trained { model, gamma })
}

/// Trains on a whole benign trace.
pub fn train_on_trace(benign: &Trace, variant: Variant, cfg: &PipelineConfig) -> Result<Trained, PipelineError> {
    let features = benign_features(benign, variant, cfg, usize::MAX)?;
    train_on_features(&features, cfg)
}

/// Number of leading epochs used when training on a trace's own benign
/// prefix.
pub fn prefix_len(trace: &Trace, cfg: &PipelineConfig) -> usize {
    let n = trace.truth.len();
    let pre = match trace.attack_start {
        Some(s) => trace.truth.iter().take_while(|&&(t, _)| t < s).count(),
        None => n,
    };
    ((pre as f64) * cfg.prefix_fraction).floor() as usize
}

/// Trains on the benign prefix of the trace under test.
pub fn train_on_prefix(trace: &Trace, variant: Variant, cfg: &PipelineConfig) -> Result<Trained, PipelineError> {
    let features = benign_features(trace, variant, cfg, prefix_len(trace, cfg))?;
    train_on_features(&features, cfg)
}
