//! Coordinate frames: WGS84 latitude/longitude to a local planar east/north
//! frame, and body-frame to world rotations from roll/pitch/yaw.
//!
//! The planar frame is an equirectangular projection anchored at a reference
//! point. It is accurate to well below a centimetre inside a 10 km radius,
//! which covers a vehicle trace.
//!
//! Euler convention: intrinsic Z-Y-X. With `Rz`, `Ry`, `Rx` the elementary
//! right-handed rotations about up, north and east,
//!
//! ```text
//! R = Rz(yaw) * Ry(pitch) * Rx(roll)
//! Rz(a) = [[c,-s,0],[s,c,0],[0,0,1]]
//! Ry(a) = [[c,0,s],[0,1,0],[-s,0,c]]
//! Rx(a) = [[1,0,0],[0,c,-s],[0,s,c]]
//! ```
//!
//! Yaw is measured counter-clockwise from east, so `yaw = pi/2` maps the body
//! x axis (forward) onto north.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by the projection, metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest latitude separation from the reference accepted by [`to_local`].
pub const MAX_LAT_SEPARATION_DEG: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point is {separation_deg:.3} deg of latitude from the reference (max {MAX_LAT_SEPARATION_DEG})")]
    TooFar { separation_deg: f64 },
    #[error("non-finite local coordinate")]
    NonFinite,
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let ok = self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon);
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: self.lat,
                lon: self.lon,
            })
        }
    }
}

/// Planar position in metres relative to a reference [`GeoPoint`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPoint {
    pub east: f64,
    pub north: f64,
}

impl LocalPoint {
    pub const ORIGIN: LocalPoint = LocalPoint {
        east: 0.0,
        north: 0.0,
    };

    pub const fn new(east: f64, north: f64) -> Self {
        LocalPoint { east, north }
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        LocalPoint::new(a[0], a[1])
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.east, self.north]
    }

    /// Horizontal part of a world-frame (ENU) vector.
    pub fn from_enu(v: &Vector3<f64>) -> Self {
        LocalPoint::new(v.x, v.y)
    }

    pub fn norm(self) -> f64 {
        self.east.hypot(self.north)
    }

    pub fn distance(self, other: LocalPoint) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.east.is_finite() && self.north.is_finite()
    }

    /// Component by axis index, 0 = east, 1 = north.
    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.east,
            1 => self.north,
            _ => panic!("axis index {i} out of range"),
        }
    }
}

impl Add for LocalPoint {
    type Output = LocalPoint;
    fn add(self, rhs: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.east + rhs.east, self.north + rhs.north)
    }
}

impl AddAssign for LocalPoint {
    fn add_assign(&mut self, rhs: LocalPoint) {
        self.east += rhs.east;
        self.north += rhs.north;
    }
}

impl Sub for LocalPoint {
    type Output = LocalPoint;
    fn sub(self, rhs: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.east - rhs.east, self.north - rhs.north)
    }
}

impl Neg for LocalPoint {
    type Output = LocalPoint;
    fn neg(self) -> LocalPoint {
        LocalPoint::new(-self.east, -self.north)
    }
}

impl Mul<f64> for LocalPoint {
    type Output = LocalPoint;
    fn mul(self, rhs: f64) -> LocalPoint {
        LocalPoint::new(self.east * rhs, self.north * rhs)
    }
}

/// Roll, pitch and yaw in radians. Yaw is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Orientation {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Orientation {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Orientation {
            roll,
            pitch,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn yaw_only(yaw: f64) -> Self {
        Orientation::new(0.0, 0.0, yaw)
    }

    pub fn is_finite(&self) -> bool {
        self.roll.is_finite() && self.pitch.is_finite() && self.yaw.is_finite()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid can land on exactly -pi after the shift for inputs like 3*pi
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Equirectangular projection of `p` into the frame anchored at `reference`.
pub fn to_local(p: GeoPoint, reference: GeoPoint) -> Result<LocalPoint, GeoError> {
    p.validate()?;
    reference.validate()?;
    let separation_deg = (p.lat - reference.lat).abs();
    if separation_deg >= MAX_LAT_SEPARATION_DEG {
        return Err(GeoError::TooFar { separation_deg });
    }
    let mut dlon = p.lon - reference.lon;
    // shortest way around the antimeridian
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let k = EARTH_RADIUS_M * PI / 180.0;
    Ok(LocalPoint {
        east: dlon * reference.lat.to_radians().cos() * k,
        north: (p.lat - reference.lat) * k,
    })
}

/// Inverse of [`to_local`].
pub fn from_local(p: LocalPoint, reference: GeoPoint) -> Result<GeoPoint, GeoError> {
    if !p.is_finite() {
        return Err(GeoError::NonFinite);
    }
    reference.validate()?;
    let k = EARTH_RADIUS_M * PI / 180.0;
    let lat = reference.lat + p.north / k;
    let cos_ref = reference.lat.to_radians().cos();
    let mut lon = reference.lon + p.east / (k * cos_ref);
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lat, lon)
}

/// Body-to-world rotation `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rotation(o: &Orientation) -> Matrix3<f64> {
    let (sr, cr) = o.roll.sin_cos();
    let (sp, cp) = o.pitch.sin_cos();
    let (sy, cy) = o.yaw.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Rotates a body-frame vector into the world frame and drops the up axis.
pub fn body_to_horizontal(o: &Orientation, v: &Vector3<f64>) -> LocalPoint {
    LocalPoint::from_enu(&(rotation(o) * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_projection_at_reference() {
        let r = GeoPoint::new(60.0, 10.0).unwrap();
        let p = to_local(r, r).unwrap();
        assert_eq!(p, LocalPoint::ORIGIN);
    }

    #[test]
    fn one_millidegree_north_at_equator() {
        let r = GeoPoint::new(0.0, 0.0).unwrap();
        let p = to_local(GeoPoint::new(0.001, 0.0).unwrap(), r).unwrap();
        // arc length 0.001 * pi / 180 * 6371000
        assert!((p.north - 111.194_926_644_558_73).abs() < 1e-6, "{}", p.north);
        assert_eq!(p.east, 0.0);
    }

    #[test]
    fn rejects_invalid_points() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        let bad = GeoPoint {
            lat: f64::NAN,
            lon: 0.0,
        };
        assert!(to_local(bad, GeoPoint::new(0.0, 0.0).unwrap()).is_err());
        let far = GeoPoint::new(62.0, 10.0).unwrap();
        assert!(matches!(
            to_local(far, GeoPoint::new(60.0, 10.0).unwrap()),
            Err(GeoError::TooFar { .. })
        ));
    }

    #[test]
    fn zero_orientation_is_identity() {
        let r = rotation(&Orientation::default());
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn yaw_quarter_turn_maps_forward_to_north() {
        let o = Orientation::yaw_only(std::f64::consts::FRAC_PI_2);
        let w = rotation(&o) * Vector3::new(1.0, 0.0, 0.0);
        assert!((w - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn pitch_and_roll_elementary_directions() {
        // positive pitch about north tilts forward (east) down: Ry(a)*x = (c, 0, -s)
        let o = Orientation::new(0.0, 0.3, 0.0);
        let w = rotation(&o) * Vector3::x();
        assert!((w - Vector3::new(0.3f64.cos(), 0.0, -0.3f64.sin())).norm() < 1e-12);
        // positive roll about east lifts body y toward up: Rx(a)*y = (0, c, s)
        let o = Orientation::new(0.2, 0.0, 0.0);
        let w = rotation(&o) * Vector3::y();
        assert!((w - Vector3::new(0.0, 0.2f64.cos(), 0.2f64.sin())).norm() < 1e-12);
    }

    #[test]
    fn yaw_is_normalized() {
        assert!((Orientation::yaw_only(3.0 * PI).yaw - PI).abs() < 1e-12);
        assert!((Orientation::yaw_only(-PI).yaw - PI).abs() < 1e-12);
        assert!((Orientation::yaw_only(-0.5).yaw + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let o = Orientation::new(0.4, -0.2, 2.0);
        assert_eq!(rotation(&o) * Vector3::zeros(), Vector3::zeros());
    }

    proptest! {
        #[test]
        fn rotation_is_proper_orthonormal(
            roll in -PI..PI, pitch in -PI / 2.0..PI / 2.0, yaw in -PI..PI
        ) {
            let r = rotation(&Orientation::new(roll, pitch, yaw));
            let err = (r * r.transpose() - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn projection_round_trip(
            lat0 in -70.0f64..70.0, lon0 in -179.0f64..179.0,
            de in -10_000.0f64..10_000.0, dn in -10_000.0f64..10_000.0
        ) {
            let r = GeoPoint::new(lat0, lon0).unwrap();
            let lp = LocalPoint::new(de, dn);
            let g = from_local(lp, r).unwrap();
            let back = to_local(g, r).unwrap();
            prop_assert!(back.distance(lp) < 1e-6);
            let again = from_local(back, r).unwrap();
            prop_assert!((again.lat - g.lat).abs() < 1e-9);
            prop_assert!((again.lon - g.lon).abs() < 1e-9);
        }
    }
}
