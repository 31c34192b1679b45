//! Road network ingestion and street point generation.
//!
//! Ways are densified into points every `step` meters, each point carries the
//! bearing of its segment, and every street point yields two candidate field
//! points perpendicular to the street.

mod io;
mod overpass;
mod thin;

use rayon::prelude::*;
use thiserror::Error;

use crate::geodesy::{self, BearingDeg, EarthModel, GeoPoint};

pub use io::{read_candidates, write_candidates, CANDIDATE_HEADER};
pub use overpass::parse_overpass;
pub use thin::min_separation_thin;

/// Default spacing of street points along ways, in meters.
pub const DEFAULT_STEP_M: f64 = 10.0;
/// Default distance from street point to field point, in meters.
pub const DEFAULT_FIELD_DISTANCE_M: f64 = 30.0;

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("malformed road export at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("way {way_id} references missing node {node_id}")]
    DanglingReference { way_id: i64, node_id: i64 },
    #[error("way {way_id} has fewer than two nodes")]
    TooFewNodes { way_id: i64 },
    #[error("node {node_id} has invalid coordinates")]
    InvalidNode { node_id: i64 },
    #[error("candidate file line {line}: {message}")]
    Candidates { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsmWay {
    way_id: i64,
    nodes: Vec<GeoPoint>,
    highway_tag: String,
}

impl OsmWay {
    pub fn new(way_id: i64, nodes: Vec<GeoPoint>, highway_tag: String) -> Result<Self, RoadError> {
        if nodes.len() < 2 {
            return Err(RoadError::TooFewNodes { way_id });
        }
        Ok(Self {
            way_id,
            nodes,
            highway_tag,
        })
    }

    pub fn way_id(&self) -> i64 {
        self.way_id
    }

    pub fn nodes(&self) -> &[GeoPoint] {
        &self.nodes
    }

    pub fn highway_tag(&self) -> &str {
        &self.highway_tag
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl Bounds {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat())
            && (self.min_lon..=self.max_lon).contains(&p.lon())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoadNetwork {
    ways: Vec<OsmWay>,
    bounds: Option<Bounds>,
}

impl RoadNetwork {
    pub fn new(ways: Vec<OsmWay>) -> Self {
        let bounds = ways
            .iter()
            .flat_map(|w| w.nodes.iter())
            .fold(None, |acc: Option<Bounds>, p| {
                Some(match acc {
                    None => Bounds {
                        min_lat: p.lat(),
                        max_lat: p.lat(),
                        min_lon: p.lon(),
                        max_lon: p.lon(),
                    },
                    Some(b) => Bounds {
                        min_lat: b.min_lat.min(p.lat()),
                        max_lat: b.max_lat.max(p.lat()),
                        min_lon: b.min_lon.min(p.lon()),
                        max_lon: b.max_lon.max(p.lon()),
                    },
                })
            });
        Self { ways, bounds }
    }

    pub fn ways(&self) -> &[OsmWay] {
        &self.ways
    }

    /// Envelope of every node, `None` for an empty network.
    pub fn bounds(&self) -> Option<Bounds> {
        self.bounds
    }

    /// Keep only ways whose highway tag is in `allow`. An empty list keeps all.
    pub fn retain_highways(self, allow: &[String]) -> Self {
        if allow.is_empty() {
            return self;
        }
        Self::new(
            self.ways
                .into_iter()
                .filter(|w| allow.iter().any(|a| a == &w.highway_tag))
                .collect(),
        )
    }
}

/// A densified point on a way, tagged with its segment bearing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreetPoint {
    pub point: GeoPoint,
    pub bearing: BearingDeg,
    pub way_id: i64,
}

#[derive(Debug, Clone, Default)]
pub struct Densified {
    pub points: Vec<StreetPoint>,
    /// Points on degenerate segments with no later bearing to borrow.
    pub dropped: usize,
}

impl Densified {
    pub fn generated(&self) -> usize {
        self.points.len() + self.dropped
    }
}

/// Densify every way into street points `step` meters apart.
///
/// Output is ordered by way, then by arc distance along the way. A segment
/// whose endpoints coincide contributes one point that takes the bearing of
/// the next non-degenerate segment of the same way, or is dropped if there is
/// none.
pub fn densify(network: &RoadNetwork, step: f64, earth: EarthModel) -> Densified {
    let per_way: Vec<Densified> = network
        .ways
        .par_iter()
        .map(|w| densify_way(w, step, earth))
        .collect();
    per_way.into_iter().fold(Densified::default(), |mut acc, d| {
        acc.points.extend(d.points);
        acc.dropped += d.dropped;
        acc
    })
}

fn densify_way(way: &OsmWay, step: f64, earth: EarthModel) -> Densified {
    let mut out = Densified::default();
    let mut pending: Vec<GeoPoint> = Vec::new();
    let mut last: Option<GeoPoint> = None;
    for pair in way.nodes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        match geodesy::initial_bearing(a, b) {
            Ok(bearing) => {
                for p in pending.drain(..) {
                    out.points.push(StreetPoint { point: p, bearing, way_id: way.way_id });
                }
                for p in geodesy::interpolate_equidistant(a, b, step, earth) {
                    if last == Some(p) {
                        continue;
                    }
                    last = Some(p);
                    out.points.push(StreetPoint { point: p, bearing, way_id: way.way_id });
                }
            }
            Err(_) => {
                if last != Some(a) {
                    last = Some(a);
                    pending.push(a);
                }
            }
        }
    }
    out.dropped += pending.len();
    out
}

/// One camera view from a street point: heading and the field point it faces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldView {
    pub heading: BearingDeg,
    pub point: GeoPoint,
}

/// A street point with its two perpendicular field views. A side becomes
/// `None` once it has been filtered out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePoint {
    pub street: GeoPoint,
    pub bearing: BearingDeg,
    pub sides: [Option<FieldView>; 2],
    pub way_id: i64,
}

impl CandidatePoint {
    pub fn surviving_sides(&self) -> usize {
        self.sides.iter().flatten().count()
    }
}

/// Build the candidate for a street point: headings at bearing +90 and -90,
/// field points `field_distance` meters along each heading.
pub fn derive_candidate(
    street: GeoPoint,
    bearing: BearingDeg,
    field_distance: f64,
    way_id: i64,
    earth: EarthModel,
) -> CandidatePoint {
    assert!(field_distance > 0.0, "field distance must be positive");
    let side = |delta: f64| {
        let heading = bearing.offset(delta);
        Some(FieldView {
            heading,
            point: geodesy::destination(street, heading, field_distance, earth),
        })
    };
    CandidatePoint {
        street,
        bearing,
        sides: [side(90.0), side(-90.0)],
        way_id,
    }
}

/// Densify and derive candidates in one pass.
pub fn candidates(
    network: &RoadNetwork,
    step: f64,
    field_distance: f64,
    earth: EarthModel,
) -> (Vec<CandidatePoint>, Densified) {
    let dense = densify(network, step, earth);
    let cands = dense
        .points
        .par_iter()
        .map(|s| derive_candidate(s.point, s.bearing, field_distance, s.way_id, earth))
        .collect();
    (cands, dense)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn single_segment_35m() {
        let earth = EarthModel::default();
        let a = pt(14.0, 100.0);
        let b = geodesy::destination(a, BearingDeg::new(60.0), 35.0, earth);
        let net = RoadNetwork::new(vec![OsmWay::new(1, vec![a, b], "road".into()).unwrap()]);
        let d = densify(&net, 10.0, earth);
        assert_eq!(d.points.len(), 4);
        let b0 = d.points[0].bearing;
        assert!(d.points.iter().all(|p| p.bearing == b0));
        assert!((b0.degrees() - 60.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_segment_borrows_next_bearing() {
        let earth = EarthModel::default();
        let a = pt(14.0, 100.0);
        let b = geodesy::destination(a, BearingDeg::new(90.0), 25.0, earth);
        let net = RoadNetwork::new(vec![
            OsmWay::new(1, vec![a, a, b], "road".into()).unwrap(),
            OsmWay::new(2, vec![b, b], "road".into()).unwrap(),
        ]);
        let d = densify(&net, 10.0, earth);
        // way 1: a (degenerate, deduplicated against the next segment's a), 10, 20
        assert_eq!(d.points.len(), 3);
        assert!(d.points.iter().all(|p| p.way_id == 1));
        assert_eq!(d.dropped, 1);
        assert_eq!(d.generated(), 4);
    }

    #[test]
    fn headings_wrap() {
        let earth = EarthModel::default();
        let c = derive_candidate(pt(0.0, 0.0), BearingDeg::new(0.0), 30.0, 1, earth);
        let h: Vec<f64> = c.sides.iter().flatten().map(|s| s.heading.degrees()).collect();
        assert_eq!(h, vec![90.0, 270.0]);
        let c = derive_candidate(pt(0.0, 0.0), BearingDeg::new(350.0), 30.0, 1, earth);
        let h: Vec<f64> = c.sides.iter().flatten().map(|s| s.heading.degrees()).collect();
        assert_eq!(h, vec![80.0, 260.0]);
    }

    #[test]
    fn field_point_due_east() {
        let earth = EarthModel::default();
        let c = derive_candidate(pt(0.0, 0.0), BearingDeg::new(0.0), 30.0, 1, earth);
        let east = c.sides[0].unwrap().point;
        let expect = (30.0 / earth.radius_m()).to_degrees();
        assert!((east.lon() - expect).abs() < 1e-12);
        assert!((expect - 0.000_269_8).abs() < 1e-7);
        assert!(east.lat().abs() < 1e-12);
    }

    #[test]
    fn allowlist() {
        let a = pt(1.0, 1.0);
        let b = pt(1.0, 1.001);
        let net = RoadNetwork::new(vec![
            OsmWay::new(1, vec![a, b], "footway".into()).unwrap(),
            OsmWay::new(2, vec![a, b], "track".into()).unwrap(),
        ]);
        let kept = net.clone().retain_highways(&["track".to_string()]);
        assert_eq!(kept.ways().len(), 1);
        assert_eq!(kept.ways()[0].way_id(), 2);
        assert_eq!(net.retain_highways(&[]).ways().len(), 2);
    }
}
