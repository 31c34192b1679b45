//! Spherical-earth geometry on latitude/longitude degrees.
//!
//! Everything here is a pure function of immutable values. Distances use the
//! haversine formula, bearings and destinations the standard great-circle
//! forms with a two-argument arctangent.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

/// Mean earth radius in meters (IUGG R1).
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("bearing is undefined between coincident points")]
    DegenerateBearing,
    #[error("earth radius must be positive, got {0}")]
    InvalidRadius(f64),
}

/// A point on the sphere in degrees. Longitude is kept in (-180, 180].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    fn to_radians(self) -> (f64, f64) {
        (self.lat.to_radians(), self.lon.to_radians())
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if lon > -180.0 && lon <= 180.0 {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped <= -180.0 {
        wrapped + 360.0
    } else {
        wrapped
    }
}

/// Sphere used for distance computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthModel {
    radius_m: f64,
}

impl EarthModel {
    pub fn new(radius_m: f64) -> Result<Self, GeoError> {
        if radius_m.is_finite() && radius_m > 0.0 {
            Ok(Self { radius_m })
        } else {
            Err(GeoError::InvalidRadius(radius_m))
        }
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }
}

impl Default for EarthModel {
    fn default() -> Self {
        Self {
            radius_m: MEAN_EARTH_RADIUS_M,
        }
    }
}

/// Compass bearing in degrees clockwise from north, normalized to [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BearingDeg(f64);

impl BearingDeg {
    pub fn new(deg: f64) -> Self {
        let mut d = deg.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        if d >= 360.0 {
            d = 0.0;
        }
        Self(d)
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    /// The bearing rotated by `delta` degrees.
    pub fn offset(self, delta: f64) -> Self {
        Self::new(self.0 + delta)
    }

    /// Smallest absolute angular difference to `other`, in [0, 180].
    pub fn angular_diff(self, other: BearingDeg) -> f64 {
        let d = (self.0 - other.0).abs() % 360.0;
        d.min(360.0 - d)
    }
}

impl fmt::Display for BearingDeg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}°", self.0)
    }
}

/// Great-circle distance in meters.
pub fn distance(a: GeoPoint, b: GeoPoint, earth: EarthModel) -> f64 {
    let (lat1, lon1) = a.to_radians();
    let (lat2, lon2) = b.to_radians();
    let s_dlat = ((lat2 - lat1) * 0.5).sin();
    let s_dlon = ((lon2 - lon1) * 0.5).sin();
    let h = s_dlat * s_dlat + lat1.cos() * lat2.cos() * s_dlon * s_dlon;
    2.0 * earth.radius_m * h.sqrt().atan2((1.0 - h).max(0.0).sqrt())
}

/// Initial great-circle bearing from `a` toward `b`.
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> Result<BearingDeg, GeoError> {
    if a == b {
        return Err(GeoError::DegenerateBearing);
    }
    let (lat1, lon1) = a.to_radians();
    let (lat2, lon2) = b.to_radians();
    let dlon = lon2 - lon1;
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    if x == 0.0 && y == 0.0 {
        return Err(GeoError::DegenerateBearing);
    }
    Ok(BearingDeg::new(y.atan2(x).to_degrees()))
}

/// The point reached after travelling `d` meters from `p` along the great
/// circle with initial bearing `bearing`.
pub fn destination(p: GeoPoint, bearing: BearingDeg, d: f64, earth: EarthModel) -> GeoPoint {
    if d == 0.0 {
        return p;
    }
    let (lat1, lon1) = p.to_radians();
    let delta = d / earth.radius_m;
    let theta = bearing.0.to_radians();
    let sin_lat2 = lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos();
    let lat2 = sin_lat2.clamp(-1.0, 1.0).asin();
    let lon2 = lon1
        + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * sin_lat2);
    let lat_deg = lat2.to_degrees().clamp(-90.0, 90.0);
    GeoPoint {
        lat: lat_deg,
        lon: normalize_lon(lon2 * 180.0 / PI),
    }
}

/// Points spaced `step` meters along the great circle from `a` toward `b`,
/// starting at `a`. `b` itself is only emitted when it falls exactly on a step.
pub fn interpolate_equidistant(
    a: GeoPoint,
    b: GeoPoint,
    step: f64,
    earth: EarthModel,
) -> Vec<GeoPoint> {
    assert!(step > 0.0, "interpolation step must be positive");
    let total = distance(a, b, earth);
    let Ok(bearing) = initial_bearing(a, b) else {
        return vec![a];
    };
    let n = (total / step).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    out.push(a);
    out.extend((1..=n).map(|k| destination(a, bearing, k as f64 * step, earth)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn longitude_is_normalized() {
        assert_eq!(pt(0.0, 190.0).lon(), -170.0);
        assert_eq!(pt(0.0, -180.0).lon(), 180.0);
        assert_eq!(pt(0.0, 540.0).lon(), 180.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn equator_degree() {
        let earth = EarthModel::default();
        let d = distance(pt(0.0, 0.0), pt(0.0, 1.0), earth);
        assert!((d - 2.0 * PI * earth.radius_m() / 360.0).abs() < 1e-6, "{d}");
        assert!((d - 111_195.08).abs() < 0.01, "{d}");
        let d = distance(pt(0.0, 0.0), pt(0.0, 1.0), EarthModel::new(6_371_000.0).unwrap());
        assert!((d - 111_194.93).abs() < 0.01, "{d}");
        assert_eq!(distance(pt(12.0, 100.0), pt(12.0, 100.0), EarthModel::default()), 0.0);
    }

    #[test]
    fn cardinal_bearings() {
        let b = initial_bearing(pt(0.0, 0.0), pt(1.0, 0.0)).unwrap();
        assert!(b.degrees().abs() < 1e-12);
        let b = initial_bearing(pt(0.0, 0.0), pt(0.0, 1.0)).unwrap();
        assert!((b.degrees() - 90.0).abs() < 1e-12);
        assert_eq!(
            initial_bearing(pt(3.0, 4.0), pt(3.0, 4.0)),
            Err(GeoError::DegenerateBearing)
        );
    }

    #[test]
    fn quarter_meridian_reaches_pole() {
        let earth = EarthModel::default();
        let p = destination(pt(0.0, 0.0), BearingDeg::new(0.0), PI * earth.radius_m() / 2.0, earth);
        assert!((p.lat() - 90.0).abs() < 1e-9);
        assert_eq!(destination(pt(5.0, 5.0), BearingDeg::new(33.0), 0.0, earth), pt(5.0, 5.0));
    }

    #[test]
    fn interpolation_counts() {
        let earth = EarthModel::default();
        let a = pt(14.0, 100.0);
        let b = destination(a, BearingDeg::new(37.0), 35.0, earth);
        let pts = interpolate_equidistant(a, b, 10.0, earth);
        assert_eq!(pts.len(), 4);
        for (k, p) in pts.iter().enumerate() {
            assert!((distance(a, *p, earth) - 10.0 * k as f64).abs() < 1e-6);
        }
        assert_eq!(interpolate_equidistant(a, a, 10.0, earth), vec![a]);
    }

    #[test]
    fn bearing_normalization() {
        assert_eq!(BearingDeg::new(-90.0).degrees(), 270.0);
        assert_eq!(BearingDeg::new(360.0).degrees(), 0.0);
        assert_eq!(BearingDeg::new(-1e-20).degrees(), 0.0);
        assert_eq!(BearingDeg::new(350.0).offset(90.0).degrees(), 80.0);
        assert!((BearingDeg::new(10.0).angular_diff(BearingDeg::new(350.0)) - 20.0).abs() < 1e-12);
    }
}
