//! Street-level image requests: planning, cost accounting and fetching.
//!
//! Requests are planned per surviving field side of a candidate, priced
//! against a budget, and fetched through a [`Transport`] with a local
//! content-addressed cache.

mod cache;
mod fetch;
mod transport;

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geodesy::{BearingDeg, GeoPoint};
use crate::roadnet::CandidatePoint;

pub use cache::{CacheEntry, FetchStatus, ImageCache, MANIFEST_HEADER};
pub use fetch::{fetch_all, FetchError, FetchOptions, FetchReport, RateLimiter, RetryPolicy};
pub use transport::{
    Fetched, GsvTransport, SyntheticTransport, Transport, TransportError, TransportRegistry,
    TransportSettings,
};

pub const DEFAULT_IMAGE_SIZE: u32 = 640;

#[derive(Debug, Error)]
pub enum SvError {
    #[error("budget exceeded: {cost} requested against a cap of {cap} (over by {overage})")]
    BudgetExceeded { cost: Usd, cap: Usd, overage: Usd },
    #[error("date window starts {start} after it ends {end}")]
    InvalidWindow { start: NaiveDate, end: NaiveDate },
    #[error("request file line {line}: {message}")]
    Requests { line: u64, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },
    #[error("unknown transport {0:?}")]
    UnknownTransport(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Amount in US cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Usd(pub u64);

impl Usd {
    pub fn from_dollars(d: f64) -> Self {
        Usd((d * 100.0).round().max(0.0) as u64)
    }

    pub fn cents(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Usd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:02}", self.0 / 100, self.0 % 100)
    }
}

/// Per-image pricing and a spending cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub unit_cost_per_1000: Usd,
    pub max: Usd,
}

impl Budget {
    pub fn new(unit_cost_usd_per_1000: f64, max_usd: f64) -> Self {
        Self {
            unit_cost_per_1000: Usd::from_dollars(unit_cost_usd_per_1000),
            max: Usd::from_dollars(max_usd),
        }
    }

    /// Cost of `n` images, rounded half-up to the cent, ignoring the cap.
    pub fn cost_of(&self, n: u64) -> Usd {
        Usd((n * self.unit_cost_per_1000.0 + 500) / 1000)
    }
}

impl Default for Budget {
    fn default() -> Self {
        Self::new(7.00, 1000.0)
    }
}

/// Cost of `n` images; fails when it would exceed the cap.
pub fn estimate_cost(n: u64, budget: &Budget) -> Result<Usd, SvError> {
    let cost = budget.cost_of(n);
    if cost > budget.max {
        return Err(SvError::BudgetExceeded {
            cost,
            cap: budget.max,
            overage: Usd(cost.0 - budget.max.0),
        });
    }
    Ok(cost)
}

/// Inclusive range of acceptable capture dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    start: NaiveDate,
    end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, SvError> {
        if start > end {
            return Err(SvError::InvalidWindow { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        (self.start..=self.end).contains(&d)
    }

    /// Number of days covered, both ends included.
    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// One street-level image to fetch: camera location and heading, plus the
/// field point the image is taken to depict.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRequest {
    pub request_id: String,
    pub street: GeoPoint,
    pub heading: BearingDeg,
    pub field: GeoPoint,
    pub size: u32,
    pub window: DateWindow,
}

impl ImageRequest {
    pub fn new(street: GeoPoint, heading: BearingDeg, field: GeoPoint, size: u32, window: DateWindow) -> Self {
        let request_id = request_id(street, heading, size, window);
        Self {
            request_id,
            street,
            heading,
            field,
            size,
            window,
        }
    }
}

/// Stable identifier: truncated SHA-256 over the request's defining fields.
pub fn request_id(street: GeoPoint, heading: BearingDeg, size: u32, window: DateWindow) -> String {
    let key = format!(
        "{:.7},{:.7},{:.3},{}x{},{},{}",
        street.lat(),
        street.lon(),
        heading.degrees(),
        size,
        size,
        window.start,
        window.end
    );
    let digest = Sha256::digest(key.as_bytes());
    hex::encode(&digest[..8])
}

/// One request per surviving (street point, heading) pair, in candidate
/// order. Duplicate pairs collapse onto their first occurrence.
pub fn plan_requests(candidates: &[CandidatePoint], window: DateWindow, size: u32) -> Vec<ImageRequest> {
    let mut seen = HashSet::new();
    candidates
        .iter()
        .flat_map(|c| c.sides.iter().flatten().map(move |v| (c.street, *v)))
        .map(|(street, v)| ImageRequest::new(street, v.heading, v.point, size, window))
        .filter(|r| seen.insert(r.request_id.clone()))
        .collect()
}

/// Deterministic seeded subsample of at most `max` requests, original order kept.
pub fn subsample(plan: Vec<ImageRequest>, max: usize, seed: u64) -> Vec<ImageRequest> {
    if plan.len() <= max {
        return plan;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, plan.len(), max).into_vec();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();
    plan.into_iter()
        .enumerate()
        .filter(|(i, _)| keep.next_if_eq(i).is_some())
        .map(|(_, r)| r)
        .collect()
}

pub const REQUEST_HEADER: [&str; 9] = [
    "request_id",
    "lat",
    "lon",
    "heading_deg",
    "field_lat",
    "field_lon",
    "size",
    "start_date",
    "end_date",
];

pub fn write_requests<W: Write>(w: W, plan: &[ImageRequest]) -> Result<(), SvError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REQUEST_HEADER)?;
    for r in plan {
        out.write_record([
            r.request_id.clone(),
            r.street.lat().to_string(),
            r.street.lon().to_string(),
            r.heading.degrees().to_string(),
            r.field.lat().to_string(),
            r.field.lon().to_string(),
            r.size.to_string(),
            r.window.start.to_string(),
            r.window.end.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_requests<R: Read>(r: R) -> Result<Vec<ImageRequest>, SvError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(REQUEST_HEADER) {
        return Err(SvError::Requests {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| SvError::Requests { line, message };
        let f = |i: usize| -> Result<f64, SvError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| bad(format!("{}: {e}", REQUEST_HEADER[i])))
        };
        let d = |i: usize| -> Result<NaiveDate, SvError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| bad(format!("{}: {e}", REQUEST_HEADER[i])))
        };
        let pt = |lat, lon| GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()));
        let req = ImageRequest {
            request_id: rec.get(0).unwrap_or("").to_string(),
            street: pt(f(1)?, f(2)?)?,
            heading: BearingDeg::new(f(3)?),
            field: pt(f(4)?, f(5)?)?,
            size: f(6)? as u32,
            window: DateWindow::new(d(7)?, d(8)?).map_err(|e| bad(e.to_string()))?,
        };
        out.push(req);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::EarthModel;
    use crate::roadnet::derive_candidate;

    fn season() -> DateWindow {
        DateWindow::new(
            NaiveDate::from_ymd_opt(2022, 5, 1).unwrap(),
            NaiveDate::from_ymd_opt(2022, 10, 31).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn season_length() {
        assert_eq!(season().len_days(), 184);
        assert!(DateWindow::new(season().end(), season().start()).is_err());
    }

    #[test]
    fn cost_model() {
        let b = Budget::new(7.0, 10_000.0);
        assert_eq!(estimate_cost(1000, &b).unwrap(), Usd(700));
        assert_eq!(estimate_cost(1000, &b).unwrap().to_string(), "$7.00");
        assert_eq!(estimate_cost(0, &b).unwrap(), Usd(0));
        assert_eq!(estimate_cost(224_000, &b).unwrap().to_string(), "$1568.00");
        // 0.7 cents and 0.5 cents round up, 0.35 rounds down
        assert_eq!(b.cost_of(1), Usd(1));
        assert_eq!(Budget::new(5.0, 1.0).cost_of(1), Usd(1));
        assert_eq!(Budget::new(3.5, 1.0).cost_of(1), Usd(0));
        match estimate_cost(1000, &Budget::new(7.0, 5.0)) {
            Err(SvError::BudgetExceeded { overage, .. }) => assert_eq!(overage, Usd(200)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plan_counts() {
        let earth = EarthModel::default();
        let mut c = derive_candidate(GeoPoint::new(14.0, 100.0).unwrap(), BearingDeg::new(10.0), 30.0, 1, earth);
        assert_eq!(plan_requests(&[c], season(), 640).len(), 2);
        assert!(plan_requests(&[], season(), 640).is_empty());
        c.sides[0] = None;
        let plan = plan_requests(&[c, c], season(), 640);
        assert_eq!(plan.len(), 1);
        assert!((plan[0].heading.degrees() - 280.0).abs() < 1e-9);
        let mut buf = Vec::new();
        write_requests(&mut buf, &plan).unwrap();
        assert_eq!(read_requests(&buf[..]).unwrap(), plan);
    }

    #[test]
    fn request_ids_are_stable() {
        let p = GeoPoint::new(14.0, 100.0).unwrap();
        let a = request_id(p, BearingDeg::new(90.0), 640, season());
        assert_eq!(a, request_id(p, BearingDeg::new(90.0), 640, season()));
        assert_ne!(a, request_id(p, BearingDeg::new(270.0), 640, season()));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let earth = EarthModel::default();
        let cands: Vec<_> = (0..50)
            .map(|i| derive_candidate(GeoPoint::new(14.0 + i as f64 * 0.001, 100.0).unwrap(), BearingDeg::new(0.0), 30.0, 1, earth))
            .collect();
        let plan = plan_requests(&cands, season(), 640);
        let a = subsample(plan.clone(), 30, 9);
        assert_eq!(a.len(), 30);
        assert_eq!(a, subsample(plan.clone(), 30, 9));
        let pos: Vec<usize> = a.iter().map(|r| plan.iter().position(|p| p == r).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(plan.clone(), 500, 9), plan);
    }
}
