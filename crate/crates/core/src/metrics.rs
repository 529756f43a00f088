//! Per-epoch detection rates, ROC sweeps, detection delay and recovered
//! position error statistics, plus the outcomes CSV format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_frames::LocalPoint;
use crate::loda_detector::calibrate_threshold;
use crate::trace_model::Hypothesis;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no {0} epochs, rate undefined")]
    UndefinedRate(&'static str),
    #[error("need at least {needed} attacked epochs for error statistics, got {got}")]
    TooFewEpochs { needed: usize, got: usize },
    #[error("gamma grid must be sorted and finite")]
    BadGrid,
    #[error("outcomes: {0}")]
    Csv(#[from] csv::Error),
}

/// What happened at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub t: f64,
    pub truth: Hypothesis,
    pub decision: Hypothesis,
    pub score: f64,
    /// NaN when no estimate was available.
    pub recovered: LocalPoint,
    pub truth_pos: LocalPoint,
}

impl EpochOutcome {
    pub fn recovered_error(&self) -> f64 {
        self.recovered.distance(self.truth_pos)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    t: f64,
    truth: u8,
    decision: u8,
    score: f64,
    rec_e: f64,
    rec_n: f64,
    true_e: f64,
    true_n: f64,
}

pub fn write_outcomes<W: Write>(out: W, outcomes: &[EpochOutcome]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for o in outcomes {
        w.serialize(Row {
            t: o.t,
            truth: o.truth.is_attack() as u8,
            decision: o.decision.is_attack() as u8,
            score: o.score,
            rec_e: o.recovered.east,
            rec_n: o.recovered.north,
            true_e: o.truth_pos.east,
            true_n: o.truth_pos.north,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_outcomes<R: Read>(input: R) -> Result<Vec<EpochOutcome>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let want = ["t", "truth", "decision", "score", "rec_e", "rec_n", "true_e", "true_n"];
    let headers = r.headers()?.clone();
    if headers.iter().ne(want.iter().copied()) {
        return Err(MetricsError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ))));
    }
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(EpochOutcome {
                t: row.t,
                truth: Hypothesis::from_flag(row.truth != 0),
                decision: Hypothesis::from_flag(row.decision != 0),
                score: row.score,
                recovered: LocalPoint::new(row.rec_e, row.rec_n),
                truth_pos: LocalPoint::new(row.true_e, row.true_n),
            })
        })
        .collect()
}

/// Counts behind the two rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub tp: usize,
    pub attacked: usize,
    pub fp: usize,
    pub benign: usize,
}

impl Tally {
    pub fn of(outcomes: &[EpochOutcome]) -> Self {
        let mut t = Tally::default();
        for o in outcomes {
            t.add(o.truth, o.decision);
        }
        t
    }

    pub fn add(&mut self, truth: Hypothesis, decision: Hypothesis) {
        if truth.is_attack() {
            self.attacked += 1;
            self.tp += decision.is_attack() as usize;
        } else {
            self.benign += 1;
            self.fp += decision.is_attack() as usize;
        }
    }

    pub fn merge(self, o: Tally) -> Tally {
        Tally {
            tp: self.tp + o.tp,
            attacked: self.attacked + o.attacked,
            fp: self.fp + o.fp,
            benign: self.benign + o.benign,
        }
    }

    pub fn tpr(&self) -> Result<f64, MetricsError> {
        if self.attacked == 0 {
            return Err(MetricsError::UndefinedRate("attacked"));
        }
        Ok(self.tp as f64 / self.attacked as f64)
    }

    pub fn fpr(&self) -> Result<f64, MetricsError> {
        if self.benign == 0 {
            return Err(MetricsError::UndefinedRate("benign"));
        }
        Ok(self.fp as f64 / self.benign as f64)
    }
}

/// `(R_TP, R_FP)` over single epochs.
pub fn rates(outcomes: &[EpochOutcome]) -> Result<(f64, f64), MetricsError> {
    let t = Tally::of(outcomes);
    Ok((t.tpr()?, t.fpr()?))
}

/// Seconds from the first attacked epoch to the first alarm at or after it.
/// `None` when the attack is never detected or there is no attack.
pub fn detection_delay(outcomes: &[EpochOutcome]) -> Option<f64> {
    delay_with(outcomes, |o| o.decision.is_attack())
}

fn delay_with(outcomes: &[EpochOutcome], alarm: impl Fn(&EpochOutcome) -> bool) -> Option<f64> {
    let start = outcomes.iter().position(|o| o.truth.is_attack())?;
    let t0 = outcomes[start].t;
    outcomes[start..].iter().find(|o| alarm(o)).map(|o| o.t - t0)
}

/// Mean of the detected delays and the number of misses.
pub fn mean_delay(delays: &[Option<f64>]) -> (Option<f64>, usize) {
    let hits: Vec<f64> = delays.iter().flatten().copied().collect();
    let misses = delays.len() - hits.len();
    if hits.is_empty() {
        return (None, misses);
    }
    (Some(hits.iter().sum::<f64>() / hits.len() as f64), misses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub gamma: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Mean over detected traces; NaN when nothing was detected.
    pub delta_t_mean: f64,
    pub misses: usize,
}

/// Rates and delays when every epoch is decided by `score >= gamma`, pooled
/// over the traces.
pub fn roc_sweep(traces: &[Vec<EpochOutcome>], grid: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    if grid.iter().any(|g| g.is_nan()) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::BadGrid);
    }
    let all: Vec<&EpochOutcome> = traces.iter().flatten().collect();
    let attacked = all.iter().filter(|o| o.truth.is_attack()).count();
    let benign = all.len() - attacked;
    if attacked == 0 {
        return Err(MetricsError::UndefinedRate("attacked"));
    }
    if benign == 0 {
        return Err(MetricsError::UndefinedRate("benign"));
    }
    Ok(grid
        .iter()
        .map(|&gamma| {
            let mut tally = Tally::default();
            for o in &all {
                tally.add(o.truth, Hypothesis::from_flag(o.score >= gamma));
            }
            let delays: Vec<Option<f64>> = traces
                .iter()
                .filter(|t| t.iter().any(|o| o.truth.is_attack()))
                .map(|t| delay_with(t, |o| o.score >= gamma))
                .collect();
            let (mean, misses) = mean_delay(&delays);
            RocPoint {
                gamma,
                tpr: tally.tp as f64 / attacked as f64,
                fpr: tally.fp as f64 / benign as f64,
                delta_t_mean: mean.unwrap_or(f64::NAN),
                misses,
            }
        })
        .collect())
}

/// Threshold whose pooled false-positive rate is at most `target`.
pub fn threshold_at_fpr(traces: &[Vec<EpochOutcome>], target: f64) -> f64 {
    let benign: Vec<f64> = traces
        .iter()
        .flatten()
        .filter(|o| !o.truth.is_attack())
        .map(|o| o.score)
        .collect();
    calibrate_threshold(&benign, target)
}

/// `lo:hi:steps` evenly spaced, inclusive.
pub fn gamma_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    /// 20th percentile.
    pub best20: f64,
    /// 80th percentile.
    pub worst20: f64,
    pub count: usize,
}

pub const MIN_STAT_EPOCHS: usize = 5;

pub fn error_stats(errors: &[f64]) -> Result<ErrorStats, MetricsError> {
    let mut e: Vec<f64> = errors.iter().copied().filter(|x| x.is_finite()).collect();
    if e.len() < MIN_STAT_EPOCHS {
        return Err(MetricsError::TooFewEpochs {
            needed: MIN_STAT_EPOCHS,
            got: e.len(),
        });
    }
    e.sort_by(f64::total_cmp);
    Ok(ErrorStats {
        mean: e.iter().sum::<f64>() / e.len() as f64,
        median: percentile(&e, 0.5),
        best20: percentile(&e, 0.2),
        worst20: percentile(&e, 0.8),
        count: e.len(),
    })
}

/// Error of the recovered position on attacked epochs.
pub fn recovered_error_stats(outcomes: &[EpochOutcome]) -> Result<ErrorStats, MetricsError> {
    let errors: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.truth.is_attack())
        .map(EpochOutcome::recovered_error)
        .collect();
    error_stats(&errors)
}
