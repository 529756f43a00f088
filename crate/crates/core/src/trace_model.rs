//! Multi-source traces, the JSON Lines trace format, and the rolling window
//! buffer with GNSS screening.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_frames::{from_local, normalize_angle, to_local, GeoError, GeoPoint, LocalPoint, Orientation};

/// Source index of GNSS. Network sources are `1..=M`.
pub const GNSS: usize = 0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("epoch at t={t} is not after the buffer head t={head}")]
    NonMonotone { t: f64, head: f64 },
    #[error("unknown source {source_id} (trace has sources 0..={max})")]
    InvalidSource { source_id: usize, max: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is missing its meta record")]
    MissingMeta,
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground-truth or detector hypothesis: `H0` benign, `H1` GNSS attacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Hypothesis {
    #[default]
    H0,
    H1,
}

impl Hypothesis {
    pub fn from_flag(attacked: bool) -> Self {
        if attacked {
            Hypothesis::H1
        } else {
            Hypothesis::H0
        }
    }

    pub fn is_attack(self) -> bool {
        self == Hypothesis::H1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionSample {
    pub t: f64,
    pub source: usize,
    pub pos: LocalPoint,
}

/// Body-frame velocity and acceleration with orientation. `None` marks a
/// quantity the platform does not provide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub t: f64,
    pub v: Option<Vector3<f64>>,
    pub a: Option<Vector3<f64>>,
    pub orientation: Orientation,
}

impl MotionSample {
    pub fn is_finite(&self) -> bool {
        let vec_ok = |x: &Option<Vector3<f64>>| x.map_or(true, |v| v.iter().all(|c| c.is_finite()));
        self.t.is_finite() && vec_ok(&self.v) && vec_ok(&self.a) && self.orientation.is_finite()
    }
}

/// A radio station (cell tower or access point) serving network source `source`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    pub id: usize,
    pub source: usize,
    pub pos: LocalPoint,
    pub tx_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssObservation {
    pub t: f64,
    pub station: usize,
    pub dbm: f64,
}

/// A complete scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub reference: GeoPoint,
    /// Number of network sources `M`.
    pub network_sources: usize,
    pub truth: Vec<(f64, LocalPoint)>,
    pub samples: Vec<PositionSample>,
    pub motion: Vec<MotionSample>,
    pub attack_mask: Vec<(f64, bool)>,
    pub attack_start: Option<f64>,
    pub delta_d: f64,
    pub stations: Vec<Station>,
    pub rss: Vec<RssObservation>,
}

/// Everything observed at one 1 Hz epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochData {
    pub t: f64,
    pub truth: LocalPoint,
    pub attacked: bool,
    pub gnss: Option<LocalPoint>,
    /// Network samples of this epoch, at most one per source.
    pub network: Vec<PositionSample>,
    /// Motion aggregated over the epoch.
    pub motion: Option<MotionSample>,
    pub rss: Vec<RssObservation>,
}

impl EpochData {
    pub fn position_samples(&self) -> impl Iterator<Item = PositionSample> + '_ {
        self.gnss
            .map(|pos| PositionSample {
                t: self.t,
                source: GNSS,
                pos,
            })
            .into_iter()
            .chain(self.network.iter().copied())
    }
}

impl Trace {
    /// Number of epochs after the first, `N`.
    pub fn epoch_count(&self) -> usize {
        self.truth.len().saturating_sub(1)
    }

    pub fn source_count(&self) -> usize {
        self.network_sources + 1
    }

    pub fn has_station_data(&self) -> bool {
        !self.stations.is_empty() && !self.rss.is_empty()
    }

    /// Groups the raw streams into per-epoch records keyed by the truth
    /// timestamps. Position samples go to the nearest epoch; motion samples in
    /// `[t - 0.5, t + 0.5)` are averaged.
    pub fn epochs(&self) -> Vec<EpochData> {
        let n = self.truth.len();
        let mut out: Vec<EpochData> = self
            .truth
            .iter()
            .enumerate()
            .map(|(i, &(t, truth))| EpochData {
                t,
                truth,
                attacked: self.attack_mask.get(i).map(|&(_, a)| a).unwrap_or(false),
                gnss: None,
                network: Vec::new(),
                motion: None,
                rss: Vec::new(),
            })
            .collect();
        if n == 0 {
            return out;
        }
        let index_of = |t: f64| -> Option<usize> {
            let i = match self.truth.binary_search_by(|(tt, _)| tt.total_cmp(&t)) {
                Ok(i) => i,
                Err(i) => {
                    if i == 0 {
                        0
                    } else if i >= n {
                        n - 1
                    } else if (self.truth[i].0 - t) < (t - self.truth[i - 1].0) {
                        i
                    } else {
                        i - 1
                    }
                }
            };
            ((self.truth[i].0 - t).abs() <= 0.5).then_some(i)
        };
        for s in &self.samples {
            let Some(i) = index_of(s.t) else { continue };
            if s.source == GNSS {
                out[i].gnss = Some(s.pos);
            } else if let Some(slot) = out[i].network.iter_mut().find(|x| x.source == s.source) {
                *slot = *s;
            } else {
                out[i].network.push(*s);
            }
        }
        for e in &mut out {
            e.network.sort_by_key(|s| s.source);
        }
        for r in &self.rss {
            if let Some(i) = index_of(r.t) {
                out[i].rss.push(*r);
            }
        }
        let mut groups: Vec<Vec<&MotionSample>> = vec![Vec::new(); n];
        for m in &self.motion {
            let t0 = self.truth[0].0;
            let k = (m.t - t0 + 0.5).floor();
            if k < 0.0 {
                continue;
            }
            let k = k as usize;
            if k < n && (m.t - self.truth[k].0) >= -0.5 && (m.t - self.truth[k].0) < 0.5 {
                groups[k].push(m);
            } else if let Some(i) = index_of(m.t) {
                groups[i].push(m);
            }
        }
        for (e, g) in out.iter_mut().zip(groups) {
            e.motion = aggregate_motion(e.t, &g);
        }
        out
    }

    /// Checks the structural invariants the readers rely on.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.truth.is_empty() {
            return Err(TraceError::Invalid("no truth records".into()));
        }
        if self.truth.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(TraceError::Invalid("truth timestamps not increasing".into()));
        }
        if self.attack_mask.len() != self.truth.len() {
            return Err(TraceError::Invalid(format!(
                "{} labels for {} truth epochs",
                self.attack_mask.len(),
                self.truth.len()
            )));
        }
        for s in &self.samples {
            if s.source > self.network_sources {
                return Err(TraceError::InvalidSource {
                    source_id: s.source,
                    max: self.network_sources,
                });
            }
            if s.t < 0.0 || !s.pos.is_finite() {
                return Err(TraceError::Invalid(format!("bad sample at t={}", s.t)));
            }
        }
        Ok(())
    }
}

fn aggregate_motion(t: f64, group: &[&MotionSample]) -> Option<MotionSample> {
    if group.is_empty() {
        return None;
    }
    let n = group.len() as f64;
    let mean_of = |get: &dyn Fn(&MotionSample) -> Option<Vector3<f64>>| -> Option<Vector3<f64>> {
        let mut acc = Vector3::zeros();
        for m in group {
            acc += get(m)?;
        }
        Some(acc / n)
    };
    let v = mean_of(&|m| m.v);
    let a = mean_of(&|m| m.a);
    let roll = group.iter().map(|m| m.orientation.roll).sum::<f64>() / n;
    let pitch = group.iter().map(|m| m.orientation.pitch).sum::<f64>() / n;
    let (s, c) = group.iter().fold((0.0, 0.0), |(s, c), m| {
        let (ys, yc) = m.orientation.yaw.sin_cos();
        (s + ys, c + yc)
    });
    Some(MotionSample {
        t,
        v,
        a,
        orientation: Orientation::new(roll, pitch, normalize_angle(s.atan2(c))),
    })
}

// ---------------------------------------------------------------------------
// JSON Lines format

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "k")]
enum Record {
    #[serde(rename = "meta")]
    Meta {
        #[serde(rename = "M")]
        m: usize,
        ref_lat: f64,
        ref_lon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attack_start: Option<f64>,
        #[serde(default = "default_delta_d")]
        delta_d: f64,
    },
    #[serde(rename = "truth")]
    Truth { t: f64, lat: f64, lon: f64 },
    #[serde(rename = "pos")]
    Pos { t: f64, m: usize, lat: f64, lon: f64 },
    #[serde(rename = "imu")]
    Imu {
        t: f64,
        v: Option<[f64; 3]>,
        a: Option<[f64; 3]>,
        rpy: [f64; 3],
    },
    #[serde(rename = "label")]
    Label { t: f64, attacked: bool },
    #[serde(rename = "station")]
    Station {
        id: usize,
        m: usize,
        lat: f64,
        lon: f64,
        tx_dbm: f64,
    },
    #[serde(rename = "rss")]
    Rss { t: f64, id: usize, dbm: f64 },
    #[serde(other)]
    Unknown,
}

fn default_delta_d() -> f64 {
    10.0
}

/// Writes `trace` as JSON Lines, meta record first.
pub fn write_jsonl<W: Write>(trace: &Trace, mut out: W) -> Result<(), TraceError> {
    let r = trace.reference;
    let mut emit = |rec: &Record| -> Result<(), TraceError> {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Record::Meta {
        m: trace.network_sources,
        ref_lat: r.lat,
        ref_lon: r.lon,
        attack_start: trace.attack_start,
        delta_d: trace.delta_d,
    })?;
    for s in &trace.stations {
        let g = from_local(s.pos, r)?;
        emit(&Record::Station {
            id: s.id,
            m: s.source,
            lat: g.lat,
            lon: g.lon,
            tx_dbm: s.tx_dbm,
        })?;
    }
    for &(t, p) in &trace.truth {
        let g = from_local(p, r)?;
        emit(&Record::Truth { t, lat: g.lat, lon: g.lon })?;
    }
    for s in &trace.samples {
        let g = from_local(s.pos, r)?;
        emit(&Record::Pos {
            t: s.t,
            m: s.source,
            lat: g.lat,
            lon: g.lon,
        })?;
    }
    for m in &trace.motion {
        let o = m.orientation;
        emit(&Record::Imu {
            t: m.t,
            v: m.v.map(|v| [v.x, v.y, v.z]),
            a: m.a.map(|a| [a.x, a.y, a.z]),
            rpy: [o.roll, o.pitch, o.yaw],
        })?;
    }
    for o in &trace.rss {
        emit(&Record::Rss {
            t: o.t,
            id: o.station,
            dbm: o.dbm,
        })?;
    }
    for &(t, attacked) in &trace.attack_mask {
        emit(&Record::Label { t, attacked })?;
    }
    Ok(())
}

/// Reads a JSON Lines trace. Unknown keys and record kinds are ignored;
/// errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut meta: Option<(usize, GeoPoint, Option<f64>, f64)> = None;
    let mut truth = Vec::new();
    let mut samples = Vec::new();
    let mut motion = Vec::new();
    let mut labels = Vec::new();
    let mut stations = Vec::new();
    let mut rss = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| TraceError::Parse {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Record::Unknown = rec {
            continue;
        }
        if meta.is_none() && !matches!(rec, Record::Meta { .. }) {
            return Err(parse_err("first record must be meta".into()));
        }
        let local = |lat: f64, lon: f64, reference: GeoPoint| {
            GeoPoint::new(lat, lon)
                .and_then(|g| to_local(g, reference))
                .map_err(|e| parse_err(e.to_string()))
        };
        match rec {
            Record::Meta {
                m,
                ref_lat,
                ref_lon,
                attack_start,
                delta_d,
            } => {
                if meta.is_some() {
                    return Err(parse_err("duplicate meta record".into()));
                }
                let reference = GeoPoint::new(ref_lat, ref_lon).map_err(|e| parse_err(e.to_string()))?;
                meta = Some((m, reference, attack_start, delta_d));
            }
            Record::Truth { t, lat, lon } => {
                let reference = meta.as_ref().unwrap().1;
                truth.push((t, local(lat, lon, reference)?));
            }
            Record::Pos { t, m, lat, lon } => {
                let (max_m, reference, ..) = *meta.as_ref().unwrap();
                if m > max_m {
                    return Err(parse_err(format!("source {m} exceeds M={max_m}")));
                }
                samples.push(PositionSample {
                    t,
                    source: m,
                    pos: local(lat, lon, reference)?,
                });
            }
            Record::Imu { t, v, a, rpy } => {
                let sample = MotionSample {
                    t,
                    v: v.map(Vector3::from),
                    a: a.map(Vector3::from),
                    orientation: Orientation::new(rpy[0], rpy[1], rpy[2]),
                };
                if !sample.is_finite() {
                    return Err(parse_err("non-finite imu record".into()));
                }
                motion.push(sample);
            }
            Record::Label { t, attacked } => labels.push((t, attacked)),
            Record::Station {
                id,
                m,
                lat,
                lon,
                tx_dbm,
            } => {
                let reference = meta.as_ref().unwrap().1;
                stations.push(Station {
                    id,
                    source: m,
                    pos: local(lat, lon, reference)?,
                    tx_dbm,
                });
            }
            Record::Rss { t, id, dbm } => rss.push(RssObservation { t, station: id, dbm }),
            Record::Unknown => unreachable!(),
        }
    }
    let (network_sources, reference, attack_start, delta_d) = meta.ok_or(TraceError::MissingMeta)?;
    let by_time = |a: &f64, b: &f64| a.total_cmp(b);
    truth.sort_by(|a, b| by_time(&a.0, &b.0));
    samples.sort_by(|a: &PositionSample, b| by_time(&a.t, &b.t).then(a.source.cmp(&b.source)));
    motion.sort_by(|a: &MotionSample, b| by_time(&a.t, &b.t));
    labels.sort_by(|a, b| by_time(&a.0, &b.0));
    rss.sort_by(|a: &RssObservation, b| by_time(&a.t, &b.t).then(a.station.cmp(&b.station)));
    // labels may be sparse; align to truth epochs
    let mut attack_mask = Vec::with_capacity(truth.len());
    let mut li = 0;
    for &(t, _) in &truth {
        while li < labels.len() && labels[li].0 < t - 1e-9 {
            li += 1;
        }
        let flag = li < labels.len() && (labels[li].0 - t).abs() <= 1e-9 && labels[li].1;
        attack_mask.push((t, flag));
    }
    let trace = Trace {
        reference,
        network_sources,
        truth,
        samples,
        motion,
        attack_mask,
        attack_start,
        delta_d,
        stations,
        rss,
    };
    trace.validate()?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Rolling window

/// One epoch held by the window.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedEpoch {
    pub t: f64,
    pub samples: Vec<PositionSample>,
    pub motion: Option<MotionSample>,
    /// GNSS was excluded at this epoch because it was flagged.
    pub screened: bool,
}

/// Rolling window `S` of the last `w` epochs.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    w: usize,
    sources: usize,
    epochs: VecDeque<BufferedEpoch>,
}

impl WindowBuffer {
    /// `sources` counts GNSS plus the network sources, `M + 1`.
    pub fn new(w: usize, sources: usize) -> Self {
        assert!(w >= 1, "window length must be positive");
        WindowBuffer {
            w,
            sources,
            epochs: VecDeque::with_capacity(w + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn head_time(&self) -> Option<f64> {
        self.epochs.back().map(|e| e.t)
    }

    pub fn epochs(&self) -> impl Iterator<Item = &BufferedEpoch> {
        self.epochs.iter()
    }

    /// Appends the epoch that was just decided. When `last_decision` is `H1`
    /// its GNSS sample is dropped and the epoch is marked screened.
    pub fn push_epoch(&mut self, epoch: &EpochData, last_decision: Hypothesis) -> Result<(), TraceError> {
        if let Some(head) = self.head_time() {
            if epoch.t <= head {
                return Err(TraceError::NonMonotone { t: epoch.t, head });
            }
        }
        let screened = last_decision.is_attack();
        let mut samples = Vec::with_capacity(self.sources);
        for s in epoch.position_samples() {
            if s.source >= self.sources {
                return Err(TraceError::InvalidSource {
                    source_id: s.source,
                    max: self.sources - 1,
                });
            }
            if screened && s.source == GNSS {
                continue;
            }
            samples.push(s);
        }
        self.epochs.push_back(BufferedEpoch {
            t: epoch.t,
            samples,
            motion: epoch.motion,
            screened,
        });
        while self.epochs.len() > self.w {
            self.epochs.pop_front();
        }
        Ok(())
    }

    /// Samples of source `m` currently in the window, oldest first.
    pub fn window_view(&self, m: usize) -> Result<Vec<PositionSample>, TraceError> {
        if m >= self.sources {
            return Err(TraceError::InvalidSource {
                source_id: m,
                max: self.sources - 1,
            });
        }
        Ok(self
            .epochs
            .iter()
            .flat_map(|e| e.samples.iter().filter(|s| s.source == m).copied())
            .collect())
    }

    pub fn motion_view(&self) -> Vec<MotionSample> {
        self.epochs.iter().filter_map(|e| e.motion).collect()
    }
}
