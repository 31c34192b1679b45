use std::io::{Read, Write};

use super::{CandidatePoint, FieldView, RoadError};
use crate::geodesy::{BearingDeg, GeoPoint};

pub const CANDIDATE_HEADER: [&str; 10] = [
    "way_id",
    "lat",
    "lon",
    "bearing_deg",
    "heading1_deg",
    "heading2_deg",
    "field1_lat",
    "field1_lon",
    "field2_lat",
    "field2_lon",
];

/// Write candidates as CSV. A filtered-out side leaves its heading and field
/// columns empty.
pub fn write_candidates<W: Write>(w: W, points: &[CandidatePoint]) -> Result<(), RoadError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CANDIDATE_HEADER)?;
    for c in points {
        let side = |s: &Option<FieldView>| match s {
            Some(v) => (
                v.heading.degrees().to_string(),
                v.point.lat().to_string(),
                v.point.lon().to_string(),
            ),
            None => Default::default(),
        };
        let (h1, f1lat, f1lon) = side(&c.sides[0]);
        let (h2, f2lat, f2lon) = side(&c.sides[1]);
        out.write_record([
            c.way_id.to_string(),
            c.street.lat().to_string(),
            c.street.lon().to_string(),
            c.bearing.degrees().to_string(),
            h1,
            h2,
            f1lat,
            f1lon,
            f2lat,
            f2lon,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_candidates<R: Read>(r: R) -> Result<Vec<CandidatePoint>, RoadError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CANDIDATE_HEADER) {
        return Err(RoadError::Candidates {
            line: 1,
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| RoadError::Candidates { line, message };
        let num = |i: usize| -> Result<Option<f64>, RoadError> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| bad(format!("column {}: {e}", CANDIDATE_HEADER[i])))
        };
        let req = |i: usize| num(i)?.ok_or_else(|| bad(format!("missing {}", CANDIDATE_HEADER[i])));
        let point = |lat: f64, lon: f64| GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()));
        let way_id = rec
            .get(0)
            .unwrap_or("")
            .parse::<i64>()
            .map_err(|e| bad(format!("way_id: {e}")))?;
        let side = |h: usize, lat: usize, lon: usize| -> Result<Option<FieldView>, RoadError> {
            match (num(h)?, num(lat)?, num(lon)?) {
                (Some(h), Some(la), Some(lo)) => Ok(Some(FieldView {
                    heading: BearingDeg::new(h),
                    point: point(la, lo)?,
                })),
                (None, None, None) => Ok(None),
                _ => Err(bad("partially populated field side".into())),
            }
        };
        out.push(CandidatePoint {
            way_id,
            street: point(req(1)?, req(2)?)?,
            bearing: BearingDeg::new(req(3)?),
            sides: [side(4, 6, 7)?, side(5, 8, 9)?],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::EarthModel;
    use crate::roadnet::derive_candidate;

    #[test]
    fn roundtrip_with_dropped_side() {
        let earth = EarthModel::default();
        let mut a = derive_candidate(GeoPoint::new(13.5, 101.25).unwrap(), BearingDeg::new(12.5), 30.0, 42, earth);
        let b = derive_candidate(GeoPoint::new(-3.0, -60.0).unwrap(), BearingDeg::new(300.0), 30.0, 7, earth);
        a.sides[1] = None;
        let mut buf = Vec::new();
        write_candidates(&mut buf, &[a, b]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&CANDIDATE_HEADER.join(",")));
        assert_eq!(read_candidates(&buf[..]).unwrap(), vec![a, b]);
    }

    #[test]
    fn bad_header() {
        assert!(read_candidates("a,b\n1,2\n".as_bytes()).is_err());
    }
}
