//! Runs every detector over traces, picks operating thresholds and builds the
//! standard simulated attack suite.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    glrt_combine, sop_centroid, BaselineError, KalmanConfig, KalmanFilter, ParticleConfig, ParticleFilter,
    StationObservation,
};
use crate::geo_frames::LocalPoint;
use crate::loda_detector::calibrate_threshold;
use crate::metrics::{detection_delay, mean_delay, EpochOutcome, Tally};
use crate::pipeline::{self, PipelineConfig, PipelineError, Trained, Variant};
use crate::simulator::{simulate, AttackKind, AttackSpec, SimConfig, SimError};
use crate::trace_model::{EpochData, Hypothesis, Trace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("method {method} cannot run on this trace: {reason}")]
    Unsupported { method: Method, reason: String },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("no benign epochs to set a threshold on")]
    NoBenign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PadsA,
    PadsN,
    PadsO,
    Sop,
    Kf,
    Pf,
    Glrt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::PadsA,
        Method::PadsN,
        Method::PadsO,
        Method::Sop,
        Method::Kf,
        Method::Pf,
        Method::Glrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PadsA => "pads-a",
            Method::PadsN => "pads-n",
            Method::PadsO => "pads-o",
            Method::Sop => "sop",
            Method::Kf => "kf",
            Method::Pf => "pf",
            Method::Glrt => "glrt",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::PadsA => Some(Variant::A),
            Method::PadsN => Some(Variant::N),
            Method::PadsO => Some(Variant::O),
            _ => None,
        }
    }

    /// Whether the decisions feed back into later scores.
    pub fn has_feedback(self) -> bool {
        self.variant().is_some()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub pipeline: PipelineConfig,
    pub kalman: KalmanConfig,
    pub particle: ParticleConfig,
    /// Assumed position noise per source, GNSS first, for the likelihood
    /// ratio test.
    pub glrt_std: Vec<f64>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            pipeline: PipelineConfig::default(),
            kalman: KalmanConfig::default(),
            particle: ParticleConfig::default(),
            glrt_std: vec![2.0, 33.0, 9.0],
        }
    }
}

/// Whatever a method learns from benign data before testing.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub method: Method,
    pub trained: Option<Trained>,
    /// Threshold calibrated on the benign data.
    pub gamma: f64,
}

/// Trains on a benign trace; for the baselines this only sets the threshold.
pub fn prepare(method: Method, benign: &Trace, cfg: &MethodConfig) -> Result<Prepared, EvalError> {
    match method.variant() {
        Some(v) => {
            let trained = pipeline::train_on_trace(benign, v, &cfg.pipeline)?;
            Ok(Prepared {
                method,
                gamma: trained.gamma,
                trained: Some(trained),
            })
        }
        None => {
            let scores: Vec<f64> = run_baseline(method, benign, cfg, f64::INFINITY)?
                .iter()
                .map(|o| o.score)
                .collect();
            Ok(Prepared {
                method,
                trained: None,
                gamma: calibrate_threshold(&scores, cfg.pipeline.target_fpr),
            })
        }
    }
}

/// Trains on the benign prefix of the trace under test.
pub fn prepare_on_prefix(method: Method, trace: &Trace, cfg: &MethodConfig) -> Result<Prepared, EvalError> {
    let n = pipeline::prefix_len(trace, &cfg.pipeline);
    let mut prefix = trace.clone();
    let end = trace.truth.get(n).map(|p| p.0).unwrap_or(f64::INFINITY);
    prefix.truth.retain(|p| p.0 < end);
    prefix.samples.retain(|s| s.t < end);
    prefix.motion.retain(|m| m.t < end + 0.5);
    prefix.attack_mask.retain(|a| a.0 < end);
    prefix.rss.retain(|r| r.t < end);
    prefix.attack_start = None;
    prepare(method, &prefix, cfg)
}

/// Runs `method` on `trace` deciding at `gamma`.
pub fn run_method(
    method: Method,
    trace: &Trace,
    cfg: &MethodConfig,
    prepared: &Prepared,
    gamma: f64,
) -> Result<Vec<EpochOutcome>, EvalError> {
    match (method.variant(), &prepared.trained) {
        (Some(v), Some(t)) => Ok(pipeline::run_trace(trace, v, &cfg.pipeline, &t.model, gamma)?),
        (Some(_), None) => Err(EvalError::Unsupported {
            method,
            reason: "no trained model".into(),
        }),
        (None, _) => run_baseline(method, trace, cfg, gamma),
    }
}

fn outcome(e: &EpochData, score: f64, gamma: f64, recovered: LocalPoint) -> EpochOutcome {
    EpochOutcome {
        t: e.t,
        truth: Hypothesis::from_flag(e.attacked),
        decision: Hypothesis::from_flag(score >= gamma),
        score,
        recovered,
        truth_pos: e.truth,
    }
}

const NAN_POINT: LocalPoint = LocalPoint::new(f64::NAN, f64::NAN);

fn run_baseline(method: Method, trace: &Trace, cfg: &MethodConfig, gamma: f64) -> Result<Vec<EpochOutcome>, EvalError> {
    let epochs = trace.epochs();
    let mut out = Vec::with_capacity(epochs.len());
    let start = epochs.iter().find_map(|e| e.gnss).unwrap_or(LocalPoint::ORIGIN);
    match method {
        Method::Kf => {
            let mut kf = KalmanFilter::new(start, cfg.kalman);
            let mut prev: Option<&EpochData> = None;
            for e in &epochs {
                let dt = prev.map(|p| e.t - p.t).unwrap_or(1.0);
                let r = kf.step(prev.and_then(|p| p.motion.as_ref()), e.gnss, dt)?;
                let score = r.innovation.map(|i| i.norm()).unwrap_or(0.0);
                out.push(outcome(e, score, gamma, r.estimate));
                prev = Some(e);
            }
        }
        Method::Pf => {
            let mut pf = ParticleFilter::new(start, cfg.particle, cfg.pipeline.seed)?;
            let mut prev: Option<&EpochData> = None;
            let mut last = [start, start];
            for e in &epochs {
                let dt = prev.map(|p| e.t - p.t).unwrap_or(1.0);
                let v = (last[1] - last[0]) * (1.0 / dt);
                let est = pf.step(prev.and_then(|p| p.motion.as_ref()), e.gnss, dt, Vector3::new(v.east, v.north, 0.0))?;
                let score = e.gnss.map(|g| g.distance(est)).unwrap_or(0.0);
                out.push(outcome(e, score, gamma, est));
                last = [last[1], est];
                prev = Some(e);
            }
        }
        Method::Glrt => {
            let std = &cfg.glrt_std;
            let var_of = |m: usize| std.get(m).copied().unwrap_or(f64::NAN).powi(2);
            for e in &epochs {
                let srcs: Vec<(LocalPoint, [f64; 2])> = e
                    .network
                    .iter()
                    .map(|s| {
                        let v = var_of(0) + var_of(s.source);
                        (s.pos, [v, v])
                    })
                    .collect();
                let recovered = precision_mean(&srcs).unwrap_or(NAN_POINT);
                let score = match e.gnss {
                    Some(p0) if !srcs.is_empty() => glrt_combine(p0, &srcs).surprise(),
                    _ => 0.0,
                };
                out.push(outcome(e, score, gamma, recovered));
            }
        }
        Method::Sop => {
            if !trace.has_station_data() {
                return Err(EvalError::Unsupported {
                    method,
                    reason: "trace carries no station positions or RSS".into(),
                });
            }
            for e in &epochs {
                let mut obs = StationObservation {
                    positions: Vec::new(),
                    rss_dbm: Vec::new(),
                };
                for r in &e.rss {
                    if let Some(s) = trace.stations.iter().find(|s| s.id == r.station) {
                        obs.positions.push(s.pos);
                        obs.rss_dbm.push(r.dbm);
                    }
                }
                let centroid = if obs.positions.is_empty() {
                    None
                } else {
                    sop_centroid(&obs).ok()
                };
                let score = match (centroid, e.gnss) {
                    (Some(c), Some(p0)) => c.distance(p0),
                    _ => 0.0,
                };
                out.push(outcome(e, score, gamma, centroid.unwrap_or(NAN_POINT)));
            }
        }
        _ => unreachable!("pipeline variants are not baselines"),
    }
    Ok(out)
}

fn precision_mean(srcs: &[(LocalPoint, [f64; 2])]) -> Option<LocalPoint> {
    let (mut acc, mut w) = (LocalPoint::ORIGIN, 0.0);
    for (p, v) in srcs {
        if v[0] > 0.0 {
            acc += *p * (1.0 / v[0]);
            w += 1.0 / v[0];
        }
    }
    (w > 0.0).then(|| acc * (1.0 / w))
}

/// Attack trace with an independently seeded benign twin for training.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    /// Attacked and benign simulator seeds.
    pub seeds: [u64; 2],
    pub attacked: Trace,
    pub benign: Trace,
}

/// Simulator settings of the `i`-th suite trace.
pub fn suite_config(i: usize, base_seed: u64) -> SimConfig {
    SimConfig {
        duration: 600,
        seed: base_seed + 2 * i as u64,
        attack: AttackSpec {
            kind: AttackKind::ExponentialDeviation,
            start: 300,
            d0: 3.0,
            growth: 1.2,
            max_offset: 60.0 + 20.0 * (i % 3) as f64,
            direction_deg: 60.0 * i as f64 + 15.0,
            ..AttackSpec::default()
        },
        ..SimConfig::default()
    }
}

pub const SUITE_SIZE: usize = 6;

/// Six exponential-deviation attack traces with their benign twins.
pub fn standard_suite(base_seed: u64) -> Result<Vec<SuiteCase>, EvalError> {
    (0..SUITE_SIZE)
        .into_par_iter()
        .map(|i| {
            let cfg = suite_config(i, base_seed);
            let benign_cfg = SimConfig {
                seed: cfg.seed + 1,
                attack: AttackSpec::default(),
                ..cfg.clone()
            };
            Ok(SuiteCase {
                name: format!("exp-{i}"),
                seeds: [cfg.seed, benign_cfg.seed],
                attacked: simulate(&cfg)?,
                benign: simulate(&benign_cfg)?,
            })
        })
        .collect()
}

/// Pooled rates and delays of one method on a set of traces.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub method: Method,
    pub gamma: f64,
    pub tally: Tally,
    pub tpr: f64,
    pub fpr: f64,
    /// Mean delay over traces that raised an alarm, in seconds.
    pub delta_t: Option<f64>,
    pub misses: usize,
    pub outcomes: Vec<Vec<EpochOutcome>>,
}

impl OperatingPoint {
    fn new(method: Method, gamma: f64, outcomes: Vec<Vec<EpochOutcome>>) -> Self {
        let tally = outcomes.iter().fold(Tally::default(), |acc, o| acc.merge(Tally::of(o)));
        let delays: Vec<Option<f64>> = outcomes.iter().map(|o| detection_delay(o)).collect();
        let (delta_t, misses) = mean_delay(&delays);
        OperatingPoint {
            method,
            gamma,
            tpr: tally.tpr().unwrap_or(f64::NAN),
            fpr: tally.fpr().unwrap_or(f64::NAN),
            tally,
            delta_t,
            misses,
            outcomes,
        }
    }
}

fn run_all(
    method: Method,
    cases: &[(&Trace, &Prepared)],
    cfg: &MethodConfig,
    gamma: f64,
) -> Result<Vec<Vec<EpochOutcome>>, EvalError> {
    cases
        .par_iter()
        .map(|(t, p)| run_method(method, t, cfg, p, gamma))
        .collect()
}

fn redecide(outcomes: &mut [Vec<EpochOutcome>], gamma: f64) {
    for o in outcomes.iter_mut().flatten() {
        o.decision = Hypothesis::from_flag(o.score >= gamma);
    }
}

const BISECTION_STEPS: usize = 24;

/// Operating point whose pooled false-positive rate over the test traces is
/// the largest not above `target_fpr`.
///
/// Methods without feedback are scored once and thresholded; the pipeline
/// variants are rerun for every candidate threshold because screening
/// depends on it.
pub fn at_matched_fpr(
    method: Method,
    cases: &[(&Trace, &Prepared)],
    cfg: &MethodConfig,
    target_fpr: f64,
) -> Result<OperatingPoint, EvalError> {
    if !method.has_feedback() {
        let mut outcomes = run_all(method, cases, cfg, f64::INFINITY)?;
        let gamma = crate::metrics::threshold_at_fpr(&outcomes, target_fpr);
        redecide(&mut outcomes, gamma);
        return Ok(OperatingPoint::new(method, gamma, outcomes));
    }
    let fpr_of = |o: &[Vec<EpochOutcome>]| {
        o.iter()
            .fold(Tally::default(), |acc, x| acc.merge(Tally::of(x)))
            .fpr()
            .map_err(|_| EvalError::NoBenign)
    };
    // scores without screening bound the useful range
    let open = run_all(method, cases, cfg, f64::INFINITY)?;
    let mut hi = open
        .iter()
        .flatten()
        .map(|o| o.score)
        .fold(0.0, f64::max)
        + 1.0;
    let mut lo = 0.0;
    let mut best = (hi, open);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let out = run_all(method, cases, cfg, mid)?;
        if fpr_of(&out)? <= target_fpr {
            hi = mid;
            best = (mid, out);
        } else {
            lo = mid;
        }
    }
    Ok(OperatingPoint::new(method, best.0, best.1))
}

/// Operating point at the threshold calibrated on each trace's benign data.
pub fn at_calibrated(method: Method, cases: &[(&Trace, &Prepared)], cfg: &MethodConfig) -> Result<OperatingPoint, EvalError> {
    let outcomes: Vec<Vec<EpochOutcome>> = cases
        .par_iter()
        .map(|(t, p)| run_method(method, t, cfg, p, p.gamma))
        .collect::<Result<_, _>>()?;
    let gamma = cases.first().map(|c| c.1.gamma).unwrap_or(f64::NAN);
    Ok(OperatingPoint::new(method, gamma, outcomes))
}

/// Prepares `method` on every suite case's benign twin.
pub fn prepare_suite(method: Method, suite: &[SuiteCase], cfg: &MethodConfig) -> Result<Vec<Prepared>, EvalError> {
    suite.par_iter().map(|c| prepare(method, &c.benign, cfg)).collect()
}

/// Matched-rate evaluation of one method on the suite.
pub fn evaluate_suite(
    method: Method,
    suite: &[SuiteCase],
    cfg: &MethodConfig,
    target_fpr: f64,
) -> Result<OperatingPoint, EvalError> {
    let prepared = prepare_suite(method, suite, cfg)?;
    let cases: Vec<(&Trace, &Prepared)> = suite.iter().map(|c| &c.attacked).zip(&prepared).collect();
    at_matched_fpr(method, &cases, cfg, target_fpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub window: usize,
    pub kappa: f64,
    pub target_fpr: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub const SWEEP_WINDOWS: [usize; 7] = [5, 10, 15, 20, 25, 30, 35];
pub const SWEEP_KAPPAS: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// PADS-A over a grid of window lengths and kernel widths.
pub fn sweep(
    suite: &[SuiteCase],
    cfg: &MethodConfig,
    windows: &[usize],
    kappas: &[f64],
    target_fpr: f64,
) -> Result<Vec<SweepRow>, EvalError> {
    let grid: Vec<(usize, f64)> = windows
        .iter()
        .flat_map(|&w| kappas.iter().map(move |&k| (w, k)))
        .collect();
    grid.par_iter()
        .map(|&(w, k)| {
            let mut c = cfg.clone();
            c.pipeline.window = w;
            c.pipeline.regression.kappa = k;
            let op = evaluate_suite(Method::PadsA, suite, &c, target_fpr)?;
            Ok(SweepRow {
                window: w,
                kappa: k,
                target_fpr,
                fpr: op.fpr,
                tpr: op.tpr,
            })
        })
        .collect()
}
