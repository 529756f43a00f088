//! Synthetic driving scenarios: filleted polyline routes with a piecewise
//! linear speed profile, 100 Hz motion sensors, GNSS, network positions
//! either drawn directly around the truth or solved from simulated RSS, and
//! GNSS spoofing attacks.
//!
//! Network noise figures are standard deviations in metres.

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::standard_normal;
use crate::geo_frames::{normalize_angle, to_local, GeoError, GeoPoint, LocalPoint, Orientation};
use crate::trace_model::{MotionSample, PositionSample, RssObservation, Station, Trace, GNSS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    /// Truth plus Gaussian noise.
    #[default]
    Direct,
    /// Log-distance RSS from the nearest stations, solved by WNLS.
    RssWnls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSourceConfig {
    /// Per-axis position noise in direct mode, m.
    pub noise_std: f64,
    /// Probability that an epoch has no sample.
    pub unavailability: f64,
    /// A sample is produced every `period` epochs.
    pub period: usize,
    /// Transmit power of generated stations, dBm.
    pub tx_dbm: f64,
    /// Mean spacing of generated stations along the route, m.
    pub station_spacing: f64,
    /// Maximum lateral distance of generated stations from the route, m.
    pub station_spread: f64,
}

impl Default for NetworkSourceConfig {
    fn default() -> Self {
        NetworkSourceConfig {
            noise_std: 33.0,
            unavailability: 0.2,
            period: 1,
            tx_dbm: 20.0,
            station_spacing: 250.0,
            station_spread: 300.0,
        }
    }
}

impl NetworkSourceConfig {
    pub fn cellular() -> Self {
        Self::default()
    }

    pub fn wifi() -> Self {
        NetworkSourceConfig {
            noise_std: 9.0,
            tx_dbm: 15.0,
            station_spacing: 40.0,
            station_spread: 60.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuConfig {
    pub rate_hz: f64,
    /// White noise per raw sample, m/s^2.
    pub accel_noise_std: f64,
    /// Constant body-frame accelerometer bias, m/s^2.
    pub accel_bias: [f64; 3],
    /// White noise per raw velocity sample, m/s.
    pub vel_noise_std: f64,
    pub vel_bias: [f64; 3],
    /// Heading noise per raw sample, rad.
    pub yaw_noise_std: f64,
    pub emit_velocity: bool,
    pub emit_accel: bool,
}

impl Default for ImuConfig {
    fn default() -> Self {
        ImuConfig {
            rate_hz: 100.0,
            accel_noise_std: 0.1,
            accel_bias: [0.02, -0.01, 0.0],
            vel_noise_std: 0.2,
            vel_bias: [0.05, 0.0, 0.0],
            yaw_noise_std: 0.01,
            emit_velocity: true,
            emit_accel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    /// Explicit waypoints in local metres. Empty means a random route.
    pub waypoints: Vec<[f64; 2]>,
    /// Explicit `(t, speed)` keypoints. Empty means a random profile.
    pub speed_keypoints: Vec<[f64; 2]>,
    pub turn_radius: f64,
    pub leg_min: f64,
    pub leg_max: f64,
    pub max_speed: f64,
    /// Probability that a random keypoint is a stop.
    pub stop_probability: f64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            waypoints: Vec::new(),
            speed_keypoints: Vec::new(),
            turn_radius: 30.0,
            leg_min: 150.0,
            leg_max: 600.0,
            max_speed: 25.0,
            stop_probability: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub lat: f64,
    pub lon: f64,
    /// Network source the station belongs to, `1..=M`.
    pub source: usize,
    pub tx_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    ConstantOffset,
    ExponentialDeviation,
    PositionJump,
    SpoofPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// First spoofed epoch.
    pub start: usize,
    /// Constant offset vector, m.
    pub offset: [f64; 2],
    /// Initial deviation of the exponential attack, m.
    pub d0: f64,
    /// Per-epoch growth factor of the exponential attack.
    pub growth: f64,
    /// Cap of the exponential deviation, m.
    pub max_offset: f64,
    /// Epochs of constant `d0` deviation before the growth starts.
    pub profile_epochs: usize,
    /// Direction of the deviation, degrees counter-clockwise from east.
    pub direction_deg: f64,
    pub jump: [f64; 2],
    /// Spoofed route relative to the truth at `start`, local metres.
    pub path: Vec<[f64; 2]>,
    pub path_speed: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            start: 0,
            offset: [0.0, 0.0],
            d0: 2.0,
            growth: 1.2,
            max_offset: 100.0,
            profile_epochs: 0,
            direction_deg: 0.0,
            jump: [0.0, 0.0],
            path: Vec::new(),
            path_speed: 10.0,
        }
    }
}

impl AttackSpec {
    /// Deviation added to the GNSS fix `k` epochs after the start, for the
    /// offset-type attacks.
    pub fn deviation(&self, k: usize) -> LocalPoint {
        let (s, c) = self.direction_deg.to_radians().sin_cos();
        let dir = LocalPoint::new(c, s);
        match self.kind {
            AttackKind::None | AttackKind::SpoofPath => LocalPoint::ORIGIN,
            AttackKind::ConstantOffset => LocalPoint::from_array(self.offset),
            AttackKind::PositionJump => LocalPoint::from_array(self.jump),
            AttackKind::ExponentialDeviation => {
                let d = if k < self.profile_epochs {
                    self.d0
                } else {
                    let e = (k - self.profile_epochs) as f64;
                    (self.d0 * self.growth.powf(e)).min(self.max_offset)
                };
                dir * d
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of epochs `N` after the first; the trace has `N + 1` epochs.
    pub duration: usize,
    pub seed: u64,
    pub ref_lat: f64,
    pub ref_lon: f64,
    pub gnss_noise_std: f64,
    pub gnss_unavailability: f64,
    pub network: Vec<NetworkSourceConfig>,
    pub mode: NetworkMode,
    pub path_loss_exponent: f64,
    /// Path loss at 1 m, dB.
    pub ref_loss_db: f64,
    pub rss_noise_std: f64,
    pub nearest_stations: usize,
    /// Explicit station layout for RSS mode. Empty means generated.
    pub stations: Vec<StationConfig>,
    pub delta_d: f64,
    pub imu: ImuConfig,
    pub route: RouteConfig,
    pub attack: AttackSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 600,
            seed: 1,
            ref_lat: 37.39,
            ref_lon: -122.08,
            gnss_noise_std: 2.0,
            gnss_unavailability: 0.0,
            network: vec![NetworkSourceConfig::cellular(), NetworkSourceConfig::wifi()],
            mode: NetworkMode::Direct,
            path_loss_exponent: 2.0,
            ref_loss_db: 40.0,
            rss_noise_std: 3.0,
            nearest_stations: 7,
            stations: Vec::new(),
            delta_d: 10.0,
            imu: ImuConfig::default(),
            route: RouteConfig::default(),
            attack: AttackSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        GeoPoint::new(self.ref_lat, self.ref_lon)?;
        if self.duration == 0 {
            return config_err("duration must be positive");
        }
        let probs = std::iter::once(self.gnss_unavailability).chain(self.network.iter().map(|n| n.unavailability));
        for u in probs {
            if !(0.0..1.0).contains(&u) {
                return config_err(format!("unavailability {u} must lie in [0, 1)"));
            }
        }
        let stds = [self.gnss_noise_std, self.rss_noise_std, self.imu.accel_noise_std, self.imu.vel_noise_std, self.imu.yaw_noise_std]
            .into_iter()
            .chain(self.network.iter().map(|n| n.noise_std));
        for s in stds {
            if !(s >= 0.0) || !s.is_finite() {
                return config_err(format!("noise std {s} must be finite and non-negative"));
            }
        }
        if self.network.iter().any(|n| n.period == 0) {
            return config_err("network period must be at least 1");
        }
        if !(self.imu.rate_hz >= 1.0) {
            return config_err("imu rate must be at least 1 Hz");
        }
        if !(self.delta_d > 0.0) {
            return config_err("delta_d must be positive");
        }
        if self.attack.start > self.duration && self.attack.kind != AttackKind::None {
            return config_err(format!("attack start {} beyond duration {}", self.attack.start, self.duration));
        }
        if self.mode == NetworkMode::RssWnls && self.nearest_stations < 3 {
            return config_err("WNLS needs at least 3 stations per fix");
        }
        for s in &self.stations {
            if s.source == GNSS || s.source > self.network.len() {
                return config_err(format!("station source {} outside 1..={}", s.source, self.network.len()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trajectory

#[derive(Debug, Clone, Copy)]
enum Element {
    Line { start: LocalPoint, dir: LocalPoint, len: f64 },
    Arc { center: LocalPoint, radius: f64, start_angle: f64, sign: f64, len: f64 },
}

impl Element {
    fn len(&self) -> f64 {
        match *self {
            Element::Line { len, .. } | Element::Arc { len, .. } => len,
        }
    }

    /// Position, heading and signed curvature at arc length `u`.
    fn pose(&self, u: f64) -> (LocalPoint, f64, f64) {
        match *self {
            Element::Line { start, dir, .. } => (start + dir * u, dir.north.atan2(dir.east), 0.0),
            Element::Arc { center, radius, start_angle, sign, .. } => {
                let a = start_angle + sign * u / radius;
                let p = center + LocalPoint::new(a.cos(), a.sin()) * radius;
                (p, normalize_angle(a + sign * std::f64::consts::FRAC_PI_2), sign / radius)
            }
        }
    }
}

/// Polyline with circular fillets at the interior waypoints, extended
/// straight past its end.
#[derive(Debug, Clone)]
pub struct Path {
    elements: Vec<Element>,
    starts: Vec<f64>,
    total: f64,
}

impl Path {
    pub fn new(waypoints: &[LocalPoint], turn_radius: f64) -> Result<Self, SimError> {
        if waypoints.len() < 2 {
            return config_err("a route needs at least two waypoints");
        }
        if !(turn_radius >= 0.0) {
            return config_err("turn radius must be non-negative");
        }
        let legs: Vec<(LocalPoint, f64)> = waypoints
            .windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                (d * (1.0 / d.norm()), d.norm())
            })
            .collect();
        if legs.iter().any(|&(_, l)| !(l > 1e-9) || !l.is_finite()) {
            return config_err("consecutive waypoints must be distinct");
        }
        // tangent length and fillet at each interior waypoint
        let mut trims = vec![0.0; waypoints.len()];
        let mut arcs: Vec<Option<Element>> = vec![None; waypoints.len()];
        for i in 1..waypoints.len() - 1 {
            let (d0, l0) = legs[i - 1];
            let (d1, l1) = legs[i];
            let theta = (d0.east * d1.north - d0.north * d1.east).atan2(d0.east * d1.east + d0.north * d1.north);
            if theta.abs() < 1e-9 || turn_radius == 0.0 {
                continue;
            }
            if theta.abs() > 175f64.to_radians() {
                return config_err(format!("route reverses at waypoint {i}"));
            }
            let half = (theta.abs() / 2.0).tan();
            let r = turn_radius.min(0.5 * l0.min(l1) / half);
            let trim = r * half;
            trims[i] = trim;
            let sign = theta.signum();
            let start = waypoints[i] - d0 * trim;
            let normal = LocalPoint::new(-d0.north, d0.east) * sign;
            let center = start + normal * r;
            let rel = start - center;
            arcs[i] = Some(Element::Arc {
                center,
                radius: r,
                start_angle: rel.north.atan2(rel.east),
                sign,
                len: r * theta.abs(),
            });
        }
        let mut elements = Vec::new();
        for (i, &(dir, len)) in legs.iter().enumerate() {
            if let Some(arc) = arcs[i] {
                elements.push(arc);
            }
            let line_len = len - trims[i] - trims[i + 1];
            if line_len > 1e-9 {
                elements.push(Element::Line {
                    start: waypoints[i] + dir * trims[i],
                    dir,
                    len: line_len,
                });
            }
        }
        let mut starts = Vec::with_capacity(elements.len());
        let mut total = 0.0;
        for e in &elements {
            starts.push(total);
            total += e.len();
        }
        Ok(Path { elements, starts, total })
    }

    pub fn length(&self) -> f64 {
        self.total
    }

    /// Position, heading and signed curvature at arc length `s`.
    pub fn pose(&self, s: f64) -> (LocalPoint, f64, f64) {
        let s = s.max(0.0);
        if s >= self.total {
            let last = self.elements[self.elements.len() - 1];
            let (p, h, _) = last.pose(last.len());
            return (p + LocalPoint::new(h.cos(), h.sin()) * (s - self.total), h, 0.0);
        }
        let i = self.starts.partition_point(|&st| st <= s).saturating_sub(1);
        self.elements[i].pose(s - self.starts[i])
    }
}

/// Piecewise linear speed over time, constant past the last keypoint.
#[derive(Debug, Clone)]
pub struct SpeedProfile {
    keys: Vec<(f64, f64)>,
    dist: Vec<f64>,
}

impl SpeedProfile {
    pub fn new(keys: &[(f64, f64)]) -> Result<Self, SimError> {
        if keys.is_empty() {
            return config_err("speed profile needs a keypoint");
        }
        if keys[0].0 != 0.0 {
            return config_err("speed profile must start at t = 0");
        }
        for w in keys.windows(2) {
            if !(w[1].0 > w[0].0) {
                return config_err(format!("speed keypoint at t={} does not follow t={}", w[1].0, w[0].0));
            }
        }
        if keys.iter().any(|&(_, v)| !(v >= 0.0) || !v.is_finite()) {
            return config_err("speeds must be finite and non-negative");
        }
        let mut dist = vec![0.0];
        for w in keys.windows(2) {
            let dt = w[1].0 - w[0].0;
            dist.push(dist[dist.len() - 1] + 0.5 * (w[0].1 + w[1].1) * dt);
        }
        Ok(SpeedProfile { keys: keys.to_vec(), dist })
    }

    /// Distance, speed and tangential acceleration at `t`.
    pub fn at(&self, t: f64) -> (f64, f64, f64) {
        let t = t.max(0.0);
        let i = self.keys.partition_point(|&(kt, _)| kt <= t) - 1;
        let (t0, v0) = self.keys[i];
        let tau = t - t0;
        if i + 1 == self.keys.len() {
            return (self.dist[i] + v0 * tau, v0, 0.0);
        }
        let (t1, v1) = self.keys[i + 1];
        let a = (v1 - v0) / (t1 - t0);
        (self.dist[i] + v0 * tau + 0.5 * a * tau * tau, v0 + a * tau, a)
    }
}

/// True kinematic state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinState {
    pub t: f64,
    pub pos: LocalPoint,
    pub vel: LocalPoint,
    pub accel: LocalPoint,
    /// Counter-clockwise from east.
    pub heading: f64,
    pub speed: f64,
    pub tangential_accel: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub path: Path,
    pub profile: SpeedProfile,
}

impl Trajectory {
    pub fn state(&self, t: f64) -> KinState {
        let (s, speed, at) = self.profile.at(t);
        let (pos, heading, curvature) = self.path.pose(s);
        let tangent = LocalPoint::new(heading.cos(), heading.sin());
        let normal = LocalPoint::new(-tangent.north, tangent.east);
        KinState {
            t,
            pos,
            vel: tangent * speed,
            accel: tangent * at + normal * (speed * speed * curvature),
            heading,
            speed,
            tangential_accel: at,
            curvature,
        }
    }
}

/// Truth states at epochs `0..=n`.
pub fn generate_trajectory(
    waypoints: &[LocalPoint],
    speed_keypoints: &[(f64, f64)],
    turn_radius: f64,
    n: usize,
) -> Result<(Trajectory, Vec<KinState>), SimError> {
    let traj = Trajectory {
        path: Path::new(waypoints, turn_radius)?,
        profile: SpeedProfile::new(speed_keypoints)?,
    };
    let states = (0..=n).map(|k| traj.state(k as f64)).collect();
    Ok((traj, states))
}

fn random_speed_profile(rc: &RouteConfig, duration: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut keys = vec![(0.0, rng.random_range(0.0..rc.max_speed * 0.6))];
    let mut t = 0.0;
    while t < duration {
        t += rng.random_range(20.0..60.0);
        if rng.random_bool(rc.stop_probability) {
            keys.push((t, 0.0));
            t += rng.random_range(5.0..20.0);
            keys.push((t, 0.0));
        } else {
            keys.push((t, rng.random_range(2.0..rc.max_speed)));
        }
    }
    keys
}

fn random_waypoints(rc: &RouteConfig, distance: f64, rng: &mut ChaCha8Rng) -> Vec<LocalPoint> {
    let mut heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut pts = vec![LocalPoint::ORIGIN];
    let mut covered = 0.0;
    while covered < distance + rc.leg_max {
        let len = rng.random_range(rc.leg_min..rc.leg_max);
        let p = pts[pts.len() - 1] + LocalPoint::new(heading.cos(), heading.sin()) * len;
        pts.push(p);
        covered += len;
        let turns = [-90.0f64, -45.0, 0.0, 45.0, 90.0];
        heading += turns[rng.random_range(0..turns.len())].to_radians();
    }
    pts
}

// ---------------------------------------------------------------------------
// Sensors

/// Raw-rate motion samples for `t` in `[0, n + 0.5)`.
pub fn synthesize_sensors(traj: &Trajectory, n: usize, imu: &ImuConfig, seed: u64) -> Vec<MotionSample> {
    let mut rng = stream(seed, 1);
    let dt = 1.0 / imu.rate_hz;
    let count = ((n as f64 + 0.5) * imu.rate_hz).ceil() as usize;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let t = k as f64 * dt;
        if t >= n as f64 + 0.5 {
            break;
        }
        let st = traj.state(t);
        let mut noise3 = |std: f64, bias: [f64; 3]| {
            Vector3::new(
                bias[0] + std * standard_normal(&mut rng),
                bias[1] + std * standard_normal(&mut rng),
                bias[2] + std * standard_normal(&mut rng),
            )
        };
        let v = Vector3::new(st.speed, 0.0, 0.0) + noise3(imu.vel_noise_std, imu.vel_bias);
        let a = Vector3::new(st.tangential_accel, st.speed * st.speed * st.curvature, 0.0)
            + noise3(imu.accel_noise_std, imu.accel_bias);
        let yaw = st.heading + imu.yaw_noise_std * standard_normal(&mut rng);
        out.push(MotionSample {
            t,
            v: imu.emit_velocity.then_some(v),
            a: imu.emit_accel.then_some(a),
            orientation: Orientation::yaw_only(yaw),
        });
    }
    out
}

/// Independent deterministic stream `k` of a seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

// ---------------------------------------------------------------------------
// Network positions

/// Received power, dBm, under log-distance path loss without shadowing.
pub fn path_loss_rss(tx_dbm: f64, distance: f64, exponent: f64, ref_loss_db: f64) -> f64 {
    tx_dbm - ref_loss_db - 10.0 * exponent * distance.max(1.0).log10()
}

/// Range implied by a received power.
pub fn rss_to_range(tx_dbm: f64, rss_dbm: f64, exponent: f64, ref_loss_db: f64) -> f64 {
    10f64.powf((tx_dbm - ref_loss_db - rss_dbm) / (10.0 * exponent))
}

const WNLS_MAX_ITER: usize = 50;

/// Gauss-Newton weighted nonlinear least squares fix from station ranges,
/// weights `1 / range^2`. `None` when the iteration fails to converge.
pub fn wnls_position(ranges: &[(LocalPoint, f64)]) -> Option<LocalPoint> {
    if ranges.len() < 3 {
        return None;
    }
    let weights: Vec<f64> = ranges.iter().map(|&(_, r)| 1.0 / r.max(1.0).powi(2)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut p = ranges
        .iter()
        .zip(&weights)
        .fold(LocalPoint::ORIGIN, |acc, (&(s, _), &w)| acc + s * (w / wsum));
    let cost = |p: LocalPoint| -> f64 {
        ranges
            .iter()
            .zip(&weights)
            .map(|(&(s, r), &w)| w * (p.distance(s) - r).powi(2))
            .sum()
    };
    let mut current = cost(p);
    for _ in 0..WNLS_MAX_ITER {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (&(s, r), &w) in ranges.iter().zip(&weights) {
            let d = p - s;
            let dist = d.norm().max(1e-9);
            let j = Vector2::new(d.east / dist, d.north / dist);
            jtj += w * j * j.transpose();
            jtr += w * j * (dist - r);
        }
        let step = jtj.try_inverse()? * (-jtr);
        let mut scale = 1.0;
        let mut next = p;
        let mut next_cost = f64::INFINITY;
        for _ in 0..20 {
            next = p + LocalPoint::new(step[0], step[1]) * scale;
            next_cost = cost(next);
            if next_cost <= current {
                break;
            }
            scale *= 0.5;
        }
        let moved = step.norm() * scale;
        if !next_cost.is_finite() {
            return None;
        }
        if next_cost <= current {
            p = next;
            current = next_cost;
        }
        if moved < 1e-6 {
            return Some(p);
        }
    }
    None
}

/// Stations spread along the route, `station_spacing` apart on average.
fn generate_stations(cfg: &SimConfig, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Vec<Station> {
    let length = traj.profile.at(cfg.duration as f64).0 + 200.0;
    let mut out = Vec::new();
    for (i, net) in cfg.network.iter().enumerate() {
        let count = ((length / net.station_spacing).ceil() as usize).max(cfg.nearest_stations);
        for _ in 0..count {
            let s = rng.random_range(-100.0..length);
            let (p, h, _) = traj.path.pose(s);
            let lateral = rng.random_range(-net.station_spread..net.station_spread);
            let along = rng.random_range(-net.station_spacing..net.station_spacing);
            let pos = p + LocalPoint::new(h.cos(), h.sin()) * along + LocalPoint::new(-h.sin(), h.cos()) * lateral;
            out.push(Station {
                id: out.len(),
                source: i + 1,
                pos,
                tx_dbm: net.tx_dbm,
            });
        }
    }
    out
}

struct NetworkOutput {
    samples: Vec<PositionSample>,
    rss: Vec<RssObservation>,
    dropped_by_solver: usize,
}

/// Network position streams for sources `1..=M`.
fn synthesize_network(cfg: &SimConfig, truth: &[(f64, LocalPoint)], stations: &[Station]) -> NetworkOutput {
    let mut out = NetworkOutput {
        samples: Vec::new(),
        rss: Vec::new(),
        dropped_by_solver: 0,
    };
    for (i, net) in cfg.network.iter().enumerate() {
        let m = i + 1;
        let mut rng = stream(cfg.seed, 10 + m as u64);
        let phase = rng.random_range(0..net.period);
        let own: Vec<&Station> = stations.iter().filter(|s| s.source == m).collect();
        for (k, &(t, p)) in truth.iter().enumerate() {
            if k % net.period != phase {
                continue;
            }
            let available = !rng.random_bool(net.unavailability);
            let pos = match cfg.mode {
                NetworkMode::Direct => {
                    let e = net.noise_std * standard_normal(&mut rng);
                    let n = net.noise_std * standard_normal(&mut rng);
                    Some(p + LocalPoint::new(e, n))
                }
                NetworkMode::RssWnls => {
                    let mut near: Vec<&Station> = own.clone();
                    near.sort_by(|a, b| a.pos.distance(p).total_cmp(&b.pos.distance(p)));
                    near.truncate(cfg.nearest_stations);
                    let mut ranges = Vec::with_capacity(near.len());
                    for s in near {
                        let clean = path_loss_rss(s.tx_dbm, s.pos.distance(p), cfg.path_loss_exponent, cfg.ref_loss_db);
                        let dbm = clean + cfg.rss_noise_std * standard_normal(&mut rng);
                        if available {
                            out.rss.push(RssObservation { t, station: s.id, dbm });
                        }
                        ranges.push((s.pos, rss_to_range(s.tx_dbm, dbm, cfg.path_loss_exponent, cfg.ref_loss_db)));
                    }
                    let fix = wnls_position(&ranges);
                    if fix.is_none() && available {
                        out.dropped_by_solver += 1;
                    }
                    fix
                }
            };
            if let (true, Some(pos)) = (available, pos) {
                out.samples.push(PositionSample { t, source: m, pos });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Attacks

/// Rewrites the GNSS stream under `spec` and recomputes the labels: an epoch
/// is attacked when the attack is active and the GNSS fix lies more than
/// `delta_d` from the truth.
pub fn inject_attack(trace: &mut Trace, spec: &AttackSpec) {
    let n = trace.truth.len();
    trace.attack_mask = trace.truth.iter().map(|&(t, _)| (t, false)).collect();
    if spec.kind == AttackKind::None || spec.start >= n {
        trace.attack_start = None;
        return;
    }
    let t0 = trace.truth[0].0;
    let start_t = trace.truth[spec.start].0;
    trace.attack_start = Some(start_t);
    let anchor = trace.truth[spec.start].1;
    let spoof_path = (spec.kind == AttackKind::SpoofPath && spec.path.len() >= 2)
        .then(|| Path::new(&spec.path.iter().map(|&p| anchor + LocalPoint::from_array(p)).collect::<Vec<_>>(), 0.0).ok())
        .flatten();
    for s in trace.samples.iter_mut().filter(|s| s.source == GNSS) {
        if s.t < start_t {
            continue;
        }
        let k = (s.t - t0).round() as usize;
        let i = k.min(n - 1);
        let elapsed = k.saturating_sub(spec.start);
        match &spoof_path {
            Some(path) => {
                let noise = s.pos - trace.truth[i].1;
                s.pos = path.pose(spec.path_speed * (s.t - start_t)).0 + noise;
            }
            None => s.pos = s.pos + spec.deviation(elapsed),
        }
    }
    label_epochs(trace);
}

/// Applies the distance rule to the current GNSS stream.
pub fn label_epochs(trace: &mut Trace) {
    let Some(start) = trace.attack_start else {
        return;
    };
    let mut gnss: Vec<Option<LocalPoint>> = vec![None; trace.truth.len()];
    for (i, e) in trace.epochs().iter().enumerate() {
        gnss[i] = e.gnss;
    }
    for ((label, &(t, truth)), g) in trace.attack_mask.iter_mut().zip(&trace.truth).zip(gnss) {
        label.1 = t >= start && g.is_some_and(|g| g.distance(truth) > trace.delta_d);
    }
}

// ---------------------------------------------------------------------------
// Scenario

/// Full scenario generation; deterministic in `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let reference = GeoPoint::new(cfg.ref_lat, cfg.ref_lon)?;
    let mut route_rng = stream(cfg.seed, 0);
    let rc = &cfg.route;
    let keys: Vec<(f64, f64)> = if rc.speed_keypoints.is_empty() {
        random_speed_profile(rc, cfg.duration as f64, &mut route_rng)
    } else {
        rc.speed_keypoints.iter().map(|k| (k[0], k[1])).collect()
    };
    let profile = SpeedProfile::new(&keys)?;
    let waypoints: Vec<LocalPoint> = if rc.waypoints.is_empty() {
        random_waypoints(rc, profile.at(cfg.duration as f64).0, &mut route_rng)
    } else {
        rc.waypoints.iter().map(|&w| LocalPoint::from_array(w)).collect()
    };
    let (traj, states) = generate_trajectory(&waypoints, &keys, rc.turn_radius, cfg.duration)?;
    let truth: Vec<(f64, LocalPoint)> = states.iter().map(|s| (s.t, s.pos)).collect();

    let mut gnss_rng = stream(cfg.seed, 2);
    let mut samples = Vec::with_capacity(truth.len() * (cfg.network.len() + 1));
    for &(t, p) in &truth {
        let e = cfg.gnss_noise_std * standard_normal(&mut gnss_rng);
        let n = cfg.gnss_noise_std * standard_normal(&mut gnss_rng);
        if !gnss_rng.random_bool(cfg.gnss_unavailability) {
            samples.push(PositionSample {
                t,
                source: GNSS,
                pos: p + LocalPoint::new(e, n),
            });
        }
    }

    let stations = match cfg.mode {
        NetworkMode::Direct => Vec::new(),
        NetworkMode::RssWnls if cfg.stations.is_empty() => generate_stations(cfg, &traj, &mut stream(cfg.seed, 3)),
        NetworkMode::RssWnls => cfg
            .stations
            .iter()
            .enumerate()
            .map(|(id, s)| {
                Ok(Station {
                    id,
                    source: s.source,
                    pos: to_local(GeoPoint::new(s.lat, s.lon)?, reference)?,
                    tx_dbm: s.tx_dbm,
                })
            })
            .collect::<Result<_, SimError>>()?,
    };
    if cfg.mode == NetworkMode::RssWnls {
        for m in 1..=cfg.network.len() {
            if stations.iter().filter(|s| s.source == m).count() < 3 {
                return config_err(format!("source {m} has fewer than 3 stations"));
            }
        }
    }
    let net = synthesize_network(cfg, &truth, &stations);
    if net.dropped_by_solver > 0 {
        tracing::info!(dropped = net.dropped_by_solver, "WNLS fixes failed to converge");
    }
    samples.extend(net.samples);
    samples.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.source.cmp(&b.source)));

    let motion = synthesize_sensors(&traj, cfg.duration, &cfg.imu, cfg.seed);
    let mut trace = Trace {
        reference,
        network_sources: cfg.network.len(),
        attack_mask: truth.iter().map(|&(t, _)| (t, false)).collect(),
        truth,
        samples,
        motion,
        attack_start: None,
        delta_d: cfg.delta_d,
        stations,
        rss: net.rss,
    };
    inject_attack(&mut trace, &cfg.attack);
    Ok(trace)
}

/// `count` traces with seeds `cfg.seed + i`, generated in parallel.
pub fn simulate_batch(cfg: &SimConfig, count: usize) -> Result<Vec<Trace>, SimError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let c = SimConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            simulate(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{read_jsonl, write_jsonl};

    fn straight(speed: f64) -> SimConfig {
        SimConfig {
            duration: 60,
            route: RouteConfig {
                waypoints: vec![[0.0, 0.0], [5000.0, 0.0]],
                speed_keypoints: vec![[0.0, speed]],
                ..RouteConfig::default()
            },
            ..SimConfig::default()
        }
    }

    fn quiet_imu() -> ImuConfig {
        ImuConfig {
            accel_noise_std: 0.0,
            accel_bias: [0.0; 3],
            vel_noise_std: 0.0,
            vel_bias: [0.0; 3],
            yaw_noise_std: 0.0,
            ..ImuConfig::default()
        }
    }

    #[test]
    fn straight_constant_speed() {
        let (_, states) =
            generate_trajectory(&[LocalPoint::ORIGIN, LocalPoint::new(0.0, 1000.0)], &[(0.0, 10.0)], 20.0, 10).unwrap();
        for (k, s) in states.iter().enumerate() {
            assert!((s.pos - LocalPoint::new(0.0, 10.0 * k as f64)).norm() < 1e-9);
            assert!((s.heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_profile() {
        let wps = [LocalPoint::ORIGIN, LocalPoint::new(100.0, 0.0), LocalPoint::new(100.0, 100.0)];
        let (_, states) = generate_trajectory(&wps, &[(0.0, 0.0)], 20.0, 30).unwrap();
        for s in &states {
            assert_eq!(s.pos, LocalPoint::ORIGIN);
            assert_eq!(s.speed, 0.0);
            assert_eq!(s.accel, LocalPoint::ORIGIN);
        }
    }

    #[test]
    fn bad_profiles_are_rejected() {
        assert!(SpeedProfile::new(&[(0.0, 1.0), (5.0, 2.0), (5.0, 3.0)]).is_err());
        assert!(SpeedProfile::new(&[(0.0, 1.0), (3.0, -1.0)]).is_err());
        assert!(Path::new(&[LocalPoint::ORIGIN], 10.0).is_err());
        assert!(Path::new(&[LocalPoint::ORIGIN, LocalPoint::ORIGIN], 10.0).is_err());
    }

    #[test]
    fn finite_differences_match_velocity() {
        let cfg = SimConfig::default();
        let mut rng = stream(3, 0);
        let keys = random_speed_profile(&cfg.route, 300.0, &mut rng);
        let profile = SpeedProfile::new(&keys).unwrap();
        let wps = random_waypoints(&cfg.route, profile.at(300.0).0, &mut rng);
        let (traj, _) = generate_trajectory(&wps, &keys, 30.0, 300).unwrap();
        let h = 0.01;
        let mut t = h;
        while t < 300.0 {
            let fd = (traj.state(t + h).pos - traj.state(t - h).pos) * (0.5 / h);
            assert!((fd - traj.state(t).vel).norm() < 0.1, "t={t}");
            t += 0.37;
        }
    }

    #[test]
    fn path_is_continuous_through_fillets() {
        let wps = [
            LocalPoint::ORIGIN,
            LocalPoint::new(200.0, 0.0),
            LocalPoint::new(200.0, 150.0),
            LocalPoint::new(50.0, 300.0),
        ];
        let path = Path::new(&wps, 40.0).unwrap();
        let mut s = 0.0;
        let (mut prev, mut prev_h, _) = path.pose(0.0);
        while s < path.length() + 50.0 {
            s += 0.5;
            let (p, h, _) = path.pose(s);
            assert!((p.distance(prev) - 0.5).abs() < 1e-3, "s={s}");
            assert!(normalize_angle(h - prev_h).abs() < 0.5 / 40.0 + 1e-9);
            prev = p;
            prev_h = h;
        }
    }

    #[test]
    fn noiseless_sensors_equal_truth() {
        let cfg = SimConfig { imu: quiet_imu(), ..straight(12.0) };
        let trace = simulate(&cfg).unwrap();
        assert_eq!(trace.motion.len(), 6050);
        for m in trace.motion.iter().step_by(97) {
            assert_eq!(m.v.unwrap(), Vector3::new(12.0, 0.0, 0.0));
            assert_eq!(m.a.unwrap(), Vector3::zeros());
            assert_eq!(m.orientation.yaw, 0.0);
        }
    }

    #[test]
    fn integrated_accel_bias_drifts_superlinearly() {
        let imu = ImuConfig {
            accel_noise_std: 0.05,
            accel_bias: [0.02, 0.0, 0.0],
            ..quiet_imu()
        };
        let cfg = SimConfig { imu, ..straight(0.0) };
        let trace = simulate(&cfg).unwrap();
        let dt = 1.0 / cfg.imu.rate_hz;
        let (mut v, mut x) = (0.0, 0.0);
        let mut drift = Vec::new();
        for m in &trace.motion {
            v += m.a.unwrap()[0] * dt;
            x += v * dt;
            drift.push((m.t, x.abs()));
        }
        let at = |t: f64| drift.iter().find(|d| d.0 >= t).unwrap().1;
        assert!(at(60.0) > 2.0 * at(30.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SimConfig {
            duration: 120,
            attack: AttackSpec {
                kind: AttackKind::ExponentialDeviation,
                start: 60,
                ..AttackSpec::default()
            },
            ..SimConfig::default()
        };
        let bytes = |c: &SimConfig| {
            let mut buf = Vec::new();
            write_jsonl(&simulate(c).unwrap(), &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(&cfg), bytes(&cfg));
        assert_ne!(bytes(&cfg), bytes(&SimConfig { seed: 2, ..cfg.clone() }));
    }

    #[test]
    fn direct_mode_without_noise_is_truth() {
        let mut cfg = straight(8.0);
        for n in &mut cfg.network {
            n.noise_std = 0.0;
            n.unavailability = 0.0;
        }
        cfg.gnss_noise_std = 0.0;
        let trace = simulate(&cfg).unwrap();
        for e in trace.epochs() {
            assert_eq!(e.gnss, Some(e.truth));
            assert_eq!(e.network.len(), 2);
            for s in &e.network {
                assert_eq!(s.pos, e.truth);
            }
        }
    }

    #[test]
    fn dropout_rate_and_noise_level() {
        let mut cfg = straight(10.0);
        cfg.duration = 10_000;
        cfg.imu.rate_hz = 1.0;
        let trace = simulate(&cfg).unwrap();
        let n = trace.truth.len() as f64;
        for (m, net) in cfg.network.iter().enumerate() {
            let got = trace.samples.iter().filter(|s| s.source == m + 1).count() as f64;
            assert!((1.0 - got / n - 0.2).abs() < 0.01, "source {}", m + 1);
            let epochs = trace.epochs();
            let errs: Vec<f64> = epochs
                .iter()
                .flat_map(|e| e.network.iter().filter(|s| s.source == m + 1).map(move |s| s.pos.east - e.truth.east))
                .collect();
            let std = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            assert!((std / net.noise_std - 1.0).abs() < 0.05);
        }
        let gnss_err: Vec<f64> = trace
            .epochs()
            .iter()
            .map(|e| e.gnss.unwrap().north - e.truth.north)
            .collect();
        let std = (gnss_err.iter().map(|e| e * e).sum::<f64>() / gnss_err.len() as f64).sqrt();
        assert!((std / cfg.gnss_noise_std - 1.0).abs() < 0.05);
    }

    #[test]
    fn wnls_recovers_exact_ranges() {
        let stations = [
            LocalPoint::new(0.0, 0.0),
            LocalPoint::new(400.0, 30.0),
            LocalPoint::new(120.0, 350.0),
            LocalPoint::new(-200.0, 180.0),
        ];
        let truth = LocalPoint::new(90.0, 110.0);
        let ranges: Vec<(LocalPoint, f64)> = stations.iter().map(|&s| (s, s.distance(truth))).collect();
        let fix = wnls_position(&ranges).unwrap();
        assert!(fix.distance(truth) < 1e-3);
        // ranges through the dB round trip
        let via_rss: Vec<(LocalPoint, f64)> = stations
            .iter()
            .map(|&s| (s, rss_to_range(20.0, path_loss_rss(20.0, s.distance(truth), 2.0, 40.0), 2.0, 40.0)))
            .collect();
        assert!(wnls_position(&via_rss).unwrap().distance(truth) < 1e-3);
        assert!(wnls_position(&ranges[..2]).is_none());
    }

    #[test]
    fn rss_mode_produces_fixes_near_truth() {
        let mut cfg = straight(10.0);
        cfg.mode = NetworkMode::RssWnls;
        cfg.rss_noise_std = 0.0;
        let trace = simulate(&cfg).unwrap();
        assert!(trace.has_station_data());
        let epochs = trace.epochs();
        let mut fixes = 0;
        for e in &epochs {
            for s in &e.network {
                assert!(s.pos.distance(e.truth) < 1e-2);
                fixes += 1;
            }
        }
        assert!(fixes > epochs.len());
        let noisy = simulate(&SimConfig { rss_noise_std: 3.0, ..cfg }).unwrap();
        assert!(noisy.samples.iter().filter(|s| s.source != GNSS).count() > 50);
    }

    fn attacked(spec: AttackSpec) -> (Trace, Trace) {
        let mut cfg = straight(10.0);
        cfg.gnss_noise_std = 0.0;
        let clean = simulate(&cfg).unwrap();
        cfg.attack = spec;
        (clean, simulate(&cfg).unwrap())
    }

    #[test]
    fn no_attack_leaves_everything_alone() {
        let (clean, t) = attacked(AttackSpec::default());
        assert_eq!(clean, t);
        assert!(t.attack_mask.iter().all(|&(_, a)| !a));
        assert_eq!(t.attack_start, None);
    }

    #[test]
    fn small_constant_offset_is_never_labelled() {
        let (clean, t) = attacked(AttackSpec {
            kind: AttackKind::ConstantOffset,
            start: 10,
            offset: [3.0, 4.0],
            ..AttackSpec::default()
        });
        assert!(t.attack_mask.iter().all(|&(_, a)| !a));
        let moved = t.samples.iter().zip(&clean.samples).filter(|(a, b)| a.pos != b.pos).count();
        assert_eq!(moved, 51);
    }

    #[test]
    fn exponential_labels_start_when_deviation_passes_threshold() {
        let (clean, t) = attacked(AttackSpec {
            kind: AttackKind::ExponentialDeviation,
            start: 20,
            d0: 2.0,
            growth: 1.5,
            max_offset: 1000.0,
            ..AttackSpec::default()
        });
        let first = t.attack_mask.iter().position(|&(_, a)| a).unwrap();
        assert_eq!(first, 24);
        let e = &t.epochs()[24];
        assert!((e.gnss.unwrap().distance(e.truth) - 10.125).abs() < 1e-6);
        // only GNSS is touched
        let others = |tr: &Trace| -> Vec<PositionSample> { tr.samples.iter().filter(|s| s.source != GNSS).copied().collect() };
        assert_eq!(others(&clean), others(&t));
        assert_eq!(clean.motion, t.motion);
        // labels can be recomputed from the trace file
        let mut buf = Vec::new();
        write_jsonl(&t, &mut buf).unwrap();
        let mut back = read_jsonl(&buf[..]).unwrap();
        let stored = back.attack_mask.clone();
        label_epochs(&mut back);
        assert_eq!(stored, back.attack_mask);
    }

    #[test]
    fn exponential_profiling_and_cap() {
        let spec = AttackSpec {
            kind: AttackKind::ExponentialDeviation,
            d0: 3.0,
            growth: 2.0,
            max_offset: 50.0,
            profile_epochs: 5,
            direction_deg: 90.0,
            ..AttackSpec::default()
        };
        assert!((spec.deviation(4).north - 3.0).abs() < 1e-12);
        assert!((spec.deviation(6).north - 6.0).abs() < 1e-12);
        assert!((spec.deviation(30).norm() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn jump_and_spoofed_path() {
        let (_, t) = attacked(AttackSpec {
            kind: AttackKind::PositionJump,
            start: 30,
            jump: [100.0, 0.0],
            ..AttackSpec::default()
        });
        assert_eq!(t.attack_mask.iter().filter(|&&(_, a)| a).count(), 31);
        let (_, t) = attacked(AttackSpec {
            kind: AttackKind::SpoofPath,
            start: 30,
            path: vec![[0.0, 0.0], [0.0, 1000.0]],
            path_speed: 10.0,
            ..AttackSpec::default()
        });
        let e = &t.epochs()[40];
        assert!((e.gnss.unwrap() - (t.truth[30].1 + LocalPoint::new(0.0, 100.0))).norm() < 1e-6);
    }

    #[test]
    fn batches_use_consecutive_seeds() {
        let cfg = SimConfig { duration: 30, ..SimConfig::default() };
        let batch = simulate_batch(&cfg, 3).unwrap();
        assert_eq!(batch[2], simulate(&SimConfig { seed: 3, ..cfg }).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SimConfig::default();
        cfg.network[0].unavailability = 1.0;
        assert!(simulate(&cfg).is_err());
        let cfg = SimConfig { gnss_noise_std: -1.0, ..SimConfig::default() };
        assert!(simulate(&cfg).is_err());
        let cfg = SimConfig {
            attack: AttackSpec {
                kind: AttackKind::PositionJump,
                start: 10_000,
                ..AttackSpec::default()
            },
            ..SimConfig::default()
        };
        assert!(simulate(&cfg).is_err());
    }
}
