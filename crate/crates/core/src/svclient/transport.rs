use std::collections::BTreeMap;
use std::io::Read as _;
use std::time::Duration;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ImageRequest, SvError};

/// Outcome of a single transport call.
#[derive(Debug, Clone, PartialEq)]
pub enum Fetched {
    Image { bytes: Vec<u8>, capture_date: NaiveDate },
    NotAvailable,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    /// Worth retrying: timeouts, throttling, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

/// Something that can resolve an image request.
pub trait Transport: Send + Sync {
    fn name(&self) -> &str;
    fn get(&self, request: &ImageRequest) -> Result<Fetched, TransportError>;
}

/// Settings handed to transport factories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportSettings {
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub base_url: String,
    pub timeout_secs: u64,
    /// Probability that the synthetic transport has imagery at a location.
    pub synthetic_availability: f64,
    /// Days the synthetic capture dates may fall outside the window on each side.
    pub synthetic_date_spread_days: i64,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            api_key_env: "GSV_API_KEY".into(),
            base_url: "https://maps.googleapis.com/maps/api/streetview".into(),
            timeout_secs: 30,
            synthetic_availability: 0.9,
            synthetic_date_spread_days: 30,
        }
    }
}

type Factory = Box<dyn Fn(&TransportSettings) -> Result<Box<dyn Transport>, SvError> + Send + Sync>;

/// Transports by name.
pub struct TransportRegistry {
    factories: BTreeMap<String, Factory>,
}

impl TransportRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry with the built-in `synthetic` and `gsv` transports.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("synthetic", |s| Ok(Box::new(SyntheticTransport::from_settings(s))));
        r.register("gsv", |s| Ok(Box::new(GsvTransport::from_env(s)?)));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&TransportSettings) -> Result<Box<dyn Transport>, SvError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, settings: &TransportSettings) -> Result<Box<dyn Transport>, SvError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| SvError::UnknownTransport(name.to_string()))?;
        f(settings)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for TransportRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Offline stand-in that answers every request deterministically from its
/// request id: availability is a seeded coin flip and capture dates scatter
/// around the request window so some land outside it.
#[derive(Debug, Clone)]
pub struct SyntheticTransport {
    availability: f64,
    spread_days: i64,
}

impl SyntheticTransport {
    pub fn new(availability: f64, spread_days: i64) -> Self {
        Self {
            availability: availability.clamp(0.0, 1.0),
            spread_days: spread_days.max(0),
        }
    }

    pub fn from_settings(s: &TransportSettings) -> Self {
        Self::new(s.synthetic_availability, s.synthetic_date_spread_days)
    }

    fn draws(request_id: &str) -> (f64, u64) {
        let d = Sha256::digest(request_id.as_bytes());
        let a = u64::from_le_bytes(d[0..8].try_into().expect("8 bytes"));
        let b = u64::from_le_bytes(d[8..16].try_into().expect("8 bytes"));
        ((a >> 11) as f64 / (1u64 << 53) as f64, b)
    }

    /// What this transport would return for `request`, without side effects.
    pub fn resolve(&self, request: &ImageRequest) -> Fetched {
        let (u, b) = Self::draws(&request.request_id);
        if u >= self.availability {
            return Fetched::NotAvailable;
        }
        let span = request.window.len_days() + 2 * self.spread_days;
        let offset = (b % span as u64) as i64 - self.spread_days;
        let capture_date = request.window.start() + chrono::Duration::days(offset);
        Fetched::Image {
            bytes: format!("synthetic image {}", request.request_id).into_bytes(),
            capture_date,
        }
    }
}

impl Transport for SyntheticTransport {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn get(&self, request: &ImageRequest) -> Result<Fetched, TransportError> {
        Ok(self.resolve(request))
    }
}

/// Google Street View Static API client. A metadata lookup (free) precedes
/// each image download (billed).
pub struct GsvTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

#[derive(Deserialize)]
struct Metadata {
    status: String,
    date: Option<String>,
}

impl GsvTransport {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn from_env(s: &TransportSettings) -> Result<Self, SvError> {
        let key = std::env::var(&s.api_key_env).map_err(|_| {
            SvError::Transport(format!("environment variable {} is not set", s.api_key_env))
        })?;
        Ok(Self::new(&s.base_url, key, Duration::from_secs(s.timeout_secs)))
    }

    pub fn metadata_url(&self, r: &ImageRequest) -> String {
        format!(
            "{}/metadata?location={},{}&key={}",
            self.base_url,
            r.street.lat(),
            r.street.lon(),
            self.api_key
        )
    }

    pub fn image_url(&self, r: &ImageRequest) -> String {
        format!(
            "{}?size={}x{}&location={},{}&heading={}&key={}",
            self.base_url,
            r.size,
            r.size,
            r.street.lat(),
            r.street.lon(),
            r.heading.degrees(),
            self.api_key
        )
    }

    fn call(&self, url: &str) -> Result<ureq::Response, TransportError> {
        match self.agent.get(url).call() {
            Ok(resp) => Ok(resp),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(TransportError::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(TransportError::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(TransportError::Transient(e.to_string())),
        }
    }
}

/// Parse a metadata capture date, `YYYY-MM` or `YYYY-MM-DD`. Month-precision
/// dates resolve to the first of the month.
pub(crate) fn parse_capture_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").ok())
        .filter(|d| d.year() > 1900)
}

impl Transport for GsvTransport {
    fn name(&self) -> &str {
        "gsv"
    }

    fn get(&self, request: &ImageRequest) -> Result<Fetched, TransportError> {
        let meta: Metadata = self
            .call(&self.metadata_url(request))?
            .into_json()
            .map_err(|e| TransportError::Transient(format!("metadata body: {e}")))?;
        match meta.status.as_str() {
            "OK" => {}
            "ZERO_RESULTS" | "NOT_FOUND" => return Ok(Fetched::NotAvailable),
            "OVER_QUERY_LIMIT" | "UNKNOWN_ERROR" => return Err(TransportError::Transient(meta.status)),
            other => return Err(TransportError::Fatal(other.to_string())),
        }
        let capture_date = meta
            .date
            .as_deref()
            .and_then(parse_capture_date)
            .ok_or_else(|| TransportError::Fatal("metadata without a capture date".into()))?;
        let mut bytes = Vec::new();
        self.call(&self.image_url(request))?
            .into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        Ok(Fetched::Image { bytes, capture_date })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{BearingDeg, GeoPoint};
    use crate::svclient::DateWindow;

    fn req(lat: f64) -> ImageRequest {
        let w = DateWindow::new(
            NaiveDate::from_ymd_opt(2022, 5, 1).unwrap(),
            NaiveDate::from_ymd_opt(2022, 10, 31).unwrap(),
        )
        .unwrap();
        let p = GeoPoint::new(lat, 100.5).unwrap();
        ImageRequest::new(p, BearingDeg::new(90.0), p, 640, w)
    }

    #[test]
    fn urls() {
        let t = GsvTransport::new("https://example.test/sv/", "KEY".into(), Duration::from_secs(1));
        let r = req(14.25);
        assert_eq!(t.metadata_url(&r), "https://example.test/sv/metadata?location=14.25,100.5&key=KEY");
        assert_eq!(
            t.image_url(&r),
            "https://example.test/sv?size=640x640&location=14.25,100.5&heading=90&key=KEY"
        );
    }

    #[test]
    fn capture_dates() {
        assert_eq!(parse_capture_date("2022-06"), NaiveDate::from_ymd_opt(2022, 6, 1));
        assert_eq!(parse_capture_date("2022-06-17"), NaiveDate::from_ymd_opt(2022, 6, 17));
        assert_eq!(parse_capture_date("June"), None);
    }

    #[test]
    fn synthetic_is_deterministic_and_mixed() {
        let t = SyntheticTransport::new(0.8, 30);
        let reqs: Vec<_> = (0..400).map(|i| req(14.0 + i as f64 * 1e-4)).collect();
        let a: Vec<_> = reqs.iter().map(|r| t.resolve(r)).collect();
        let b: Vec<_> = reqs.iter().map(|r| t.resolve(r)).collect();
        assert_eq!(a, b);
        let missing = a.iter().filter(|f| **f == Fetched::NotAvailable).count();
        assert!((40..=120).contains(&missing), "{missing}");
        let outside = a
            .iter()
            .filter(|f| matches!(f, Fetched::Image { capture_date, .. } if !reqs[0].window.contains(*capture_date)))
            .count();
        assert!(outside > 0);
    }

    #[test]
    fn registry() {
        let r = TransportRegistry::with_builtins();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["gsv", "synthetic"]);
        assert_eq!(r.build("synthetic", &TransportSettings::default()).unwrap().name(), "synthetic");
        assert!(matches!(
            r.build("carrier-pigeon", &TransportSettings::default()),
            Err(SvError::UnknownTransport(_))
        ));
        let s = TransportSettings {
            api_key_env: "CROPREF_TEST_UNSET_KEY".into(),
            ..Default::default()
        };
        assert!(r.build("gsv", &s).is_err());
    }
}
