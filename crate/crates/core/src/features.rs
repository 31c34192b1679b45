//! Harmonic-regression features from satellite band time series.
//!
//! Each band is cloud-masked and fitted with a truncated Fourier series
//!
//! ```text
//! value(t) = a0 + sum_k [ a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T) ]
//! ```
//!
//! by least squares. The coefficients of the five signals (RedEdge4, SWIR1,
//! SWIR2, NIR, GCVI) form the feature vector, 35 values at order 3.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("GCVI needs a positive green reflectance, got {0}")]
    NonPositiveGreen(f64),
    #[error("{band}: {found} observations, need at least {needed}")]
    InsufficientObservations { band: Band, found: usize, needed: usize },
    #[error("{band}: sampling times do not determine all harmonic terms")]
    DegenerateSampling { band: Band },
    #[error("{band}: no samples")]
    MissingBand { band: Band },
    #[error("invalid harmonic settings: {0}")]
    Config(String),
    #[error("time series line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}")]
    Io(String),
}

impl From<csv::Error> for FeatureError {
    fn from(e: csv::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    RedEdge4,
    Swir1,
    Swir2,
    Nir,
    Gcvi,
    Green,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::RedEdge4 => "RedEdge4",
            Band::Swir1 => "SWIR1",
            Band::Swir2 => "SWIR2",
            Band::Nir => "NIR",
            Band::Gcvi => "GCVI",
            Band::Green => "Green",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Band::RedEdge4, Band::Swir1, Band::Swir2, Band::Nir, Band::Gcvi, Band::Green]
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| s.to_string())
    }
}

/// Signals in feature-vector order.
pub const SIGNALS: [Band; 5] = [Band::RedEdge4, Band::Swir1, Band::Swir2, Band::Nir, Band::Gcvi];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSample {
    /// Days since season start.
    pub t: f64,
    pub value: f64,
    /// Cloud probability, percent.
    pub cloud_prob: f64,
}

/// Time-ordered samples of one band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSeries {
    pub band: Band,
    pub samples: Vec<BandSample>,
}

impl BandSeries {
    /// Sorts by time; repeated timestamps are rejected.
    pub fn new(band: Band, mut samples: Vec<BandSample>) -> Result<Self, String> {
        if let Some(s) = samples.iter().find(|s| !s.t.is_finite() || !s.value.is_finite()) {
            return Err(format!("{band}: non-finite sample at t = {}", s.t));
        }
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        if let Some(w) = samples.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(format!("{band}: repeated time {}", w[0].t));
        }
        Ok(Self { band, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonicConfig {
    pub order: usize,
    pub period_days: f64,
    pub min_obs: usize,
    /// Samples with cloud probability strictly above this percentage are dropped.
    pub cloud_threshold: f64,
}

impl HarmonicConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.period_days.is_finite() && self.period_days > 0.0) {
            return Err(FeatureError::Config(format!("period must be positive, got {}", self.period_days)));
        }
        if self.min_obs < self.n_coefficients() {
            return Err(FeatureError::Config(format!(
                "min_obs {} is below the {} coefficients of an order-{} fit",
                self.min_obs,
                self.n_coefficients(),
                self.order
            )));
        }
        Ok(())
    }

    /// Coefficients per signal: intercept plus a cosine and sine per order.
    pub fn n_coefficients(&self) -> usize {
        2 * self.order + 1
    }

    pub fn n_features(&self) -> usize {
        SIGNALS.len() * self.n_coefficients()
    }
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            order: 3,
            period_days: 184.0,
            min_obs: 10,
            cloud_threshold: 40.0,
        }
    }
}

pub fn gcvi(nir: f64, green: f64) -> Result<f64, FeatureError> {
    if green <= 0.0 || !green.is_finite() {
        return Err(FeatureError::NonPositiveGreen(green));
    }
    Ok(nir / green - 1.0)
}

pub fn mask_clouds(series: &BandSeries, threshold: f64) -> BandSeries {
    BandSeries {
        band: series.band,
        samples: series
            .samples
            .iter()
            .filter(|s| s.cloud_prob <= threshold)
            .copied()
            .collect(),
    }
}

/// GCVI at every time present in both series. The cloud probability of a
/// derived sample is the larger of its two inputs.
pub fn gcvi_series(nir: &BandSeries, green: &BandSeries) -> Result<BandSeries, FeatureError> {
    let greens: BTreeMap<u64, &BandSample> = green.samples.iter().map(|s| (s.t.to_bits(), s)).collect();
    let mut out = Vec::new();
    for n in &nir.samples {
        if let Some(g) = greens.get(&n.t.to_bits()) {
            out.push(BandSample {
                t: n.t,
                value: gcvi(n.value, g.value)?,
                cloud_prob: n.cloud_prob.max(g.cloud_prob),
            });
        }
    }
    Ok(BandSeries {
        band: Band::Gcvi,
        samples: out,
    })
}

/// Design-matrix row for time `t`.
fn harmonic_row(t: f64, order: usize, period: f64, row: &mut [f64]) {
    row[0] = 1.0;
    for k in 1..=order {
        let w = 2.0 * PI * k as f64 * t / period;
        row[2 * k - 1] = w.cos();
        row[2 * k] = w.sin();
    }
}

/// Evaluate the fitted series at `t`.
pub fn harmonic_eval(coef: &[f64], t: f64, period: f64) -> f64 {
    let order = (coef.len() - 1) / 2;
    let mut row = vec![0.0; coef.len()];
    harmonic_row(t, order, period, &mut row);
    row.iter().zip(coef).map(|(x, c)| x * c).sum()
}

/// Least-squares harmonic coefficients `(a0, a1, b1, ..., a_k, b_k)`.
///
/// Solved by Householder QR of the design matrix, so conditioning is that of
/// the matrix rather than its normal equations.
pub fn harmonic_fit(series: &BandSeries, cfg: &HarmonicConfig) -> Result<Vec<f64>, FeatureError> {
    cfg.validate()?;
    let n = series.len();
    let p = cfg.n_coefficients();
    if n < cfg.min_obs {
        return Err(FeatureError::InsufficientObservations {
            band: series.band,
            found: n,
            needed: cfg.min_obs,
        });
    }
    // column-major design matrix
    let mut a = vec![0.0; n * p];
    let mut row = vec![0.0; p];
    for (i, s) in series.samples.iter().enumerate() {
        harmonic_row(s.t, cfg.order, cfg.period_days, &mut row);
        for j in 0..p {
            a[j * n + i] = row[j];
        }
    }
    let mut y: Vec<f64> = series.samples.iter().map(|s| s.value).collect();
    least_squares_qr(&mut a, n, p, &mut y).ok_or(FeatureError::DegenerateSampling { band: series.band })
}

/// Solve min ||A x - y|| for column-major `a` (n x p, n >= p) in place.
/// Returns `None` when A is numerically rank deficient.
fn least_squares_qr(a: &mut [f64], n: usize, p: usize, y: &mut [f64]) -> Option<Vec<f64>> {
    let col_norms: Vec<f64> = (0..p)
        .map(|j| a[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let norm = a[k * n + k..(k + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * col_norms[k].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        // Householder vector v = x - alpha e1, stored in place of column k
        a[k * n + k] -= alpha;
        let vnorm2: f64 = a[k * n + k..(k + 1) * n].iter().map(|v| v * v).sum();
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k + 1..p {
            let dot: f64 = (k..n).map(|i| a[k * n + i] * a[j * n + i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                a[j * n + i] -= f * a[k * n + i];
            }
        }
        let dot: f64 = (k..n).map(|i| a[k * n + i] * y[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..n {
            y[i] -= f * a[k * n + i];
        }
    }
    let mut x = vec![0.0; p];
    for k in (0..p).rev() {
        let s: f64 = (k + 1..p).map(|j| a[j * n + k] * x[j]).sum();
        x[k] = (y[k] - s) / diag[k];
    }
    Some(x)
}

/// Harmonic coefficients of the five signals, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// All raw band series observed at one point.
pub type PointSeries = BTreeMap<Band, BandSeries>;

/// Mask clouds, derive GCVI from NIR and Green (unless a GCVI series is
/// supplied), and fit every signal.
pub fn extract_features(bands: &PointSeries, cfg: &HarmonicConfig) -> Result<FeatureVector, FeatureError> {
    cfg.validate()?;
    let masked = |b: Band| {
        bands
            .get(&b)
            .map(|s| mask_clouds(s, cfg.cloud_threshold))
            .ok_or(FeatureError::MissingBand { band: b })
    };
    let mut out = Vec::with_capacity(cfg.n_features());
    for band in SIGNALS {
        let series = match (band, bands.contains_key(&Band::Gcvi)) {
            (Band::Gcvi, false) => gcvi_series(&masked(Band::Nir)?, &masked(Band::Green)?)?,
            _ => masked(band)?,
        };
        out.extend(harmonic_fit(&series, cfg)?);
    }
    Ok(FeatureVector(out))
}

pub const SERIES_HEADER: [&str; 5] = ["point_id", "band", "t_days", "value", "cloud_prob"];

/// Read a long-format time-series CSV into per-point band series.
pub fn read_series<R: Read>(r: R) -> Result<BTreeMap<String, PointSeries>, FeatureError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(SERIES_HEADER) {
        return Err(FeatureError::Parse {
            line: 1,
            message: format!("expected header {}", SERIES_HEADER.join(",")),
        });
    }
    let mut raw: BTreeMap<String, BTreeMap<Band, Vec<BandSample>>> = BTreeMap::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| FeatureError::Parse { line, message };
        let band: Band = rec[1].parse().map_err(|b| bad(format!("unknown band {b:?}")))?;
        let num = |i: usize| -> Result<f64, FeatureError> {
            rec[i].trim().parse().map_err(|e| bad(format!("{}: {e}", SERIES_HEADER[i])))
        };
        let sample = BandSample {
            t: num(2)?,
            value: num(3)?,
            cloud_prob: num(4)?,
        };
        if !(0.0..=100.0).contains(&sample.cloud_prob) {
            return Err(bad(format!("cloud probability {} outside [0, 100]", sample.cloud_prob)));
        }
        if let Some(bands) = raw.get_mut(&rec[0]) {
            bands.entry(band).or_default().push(sample);
        } else {
            raw.entry(rec[0].to_string()).or_default().entry(band).or_default().push(sample);
        }
    }
    raw.into_iter()
        .map(|(id, bands)| {
            let series = bands
                .into_iter()
                .map(|(b, s)| {
                    BandSeries::new(b, s)
                        .map(|s| (b, s))
                        .map_err(|m| FeatureError::Parse { line: 0, message: format!("point {id}: {m}") })
                })
                .collect::<Result<PointSeries, _>>()?;
            Ok((id, series))
        })
        .collect()
}

pub fn write_series<W: Write>(w: W, points: &BTreeMap<String, PointSeries>) -> Result<(), FeatureError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SERIES_HEADER)?;
    for (id, bands) in points {
        for series in bands.values() {
            for s in &series.samples {
                out.write_record([
                    id.as_str(),
                    series.band.name(),
                    &s.t.to_string(),
                    &s.value.to_string(),
                    &s.cloud_prob.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Outcome of extracting features for many points.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub rows: BTreeMap<String, FeatureVector>,
    /// Points whose extraction failed, with the reason.
    pub failures: Vec<(String, FeatureError)>,
}

/// Extract features for every point in parallel; failures are collected,
/// not fatal.
pub fn extract_all(points: &BTreeMap<String, PointSeries>, cfg: &HarmonicConfig) -> Result<FeatureTable, FeatureError> {
    cfg.validate()?;
    let results: Vec<(&String, Result<FeatureVector, FeatureError>)> = points
        .par_iter()
        .map(|(id, bands)| (id, extract_features(bands, cfg)))
        .collect();
    let mut table = FeatureTable::default();
    for (id, r) in results {
        match r {
            Ok(v) => {
                table.rows.insert(id.clone(), v);
            }
            Err(e) => table.failures.push((id.clone(), e)),
        }
    }
    Ok(table)
}

pub fn write_features<W: Write>(w: W, rows: &BTreeMap<String, FeatureVector>, n_features: usize) -> Result<(), FeatureError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["point_id".to_string()];
    header.extend((0..n_features).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for (id, v) in rows {
        let mut rec = Vec::with_capacity(n_features + 1);
        rec.push(id.clone());
        rec.extend(v.as_slice().iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(r: R) -> Result<BTreeMap<String, FeatureVector>, FeatureError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let n = header.len().saturating_sub(1);
    let valid = header.get(0) == Some("point_id")
        && header.iter().skip(1).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !valid || n == 0 {
        return Err(FeatureError::Parse {
            line: 1,
            message: "expected header point_id,f0,f1,...".into(),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FeatureError::Parse { line, message: e.to_string() })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Parse { line, message: "non-finite feature".into() });
        }
        out.insert(rec[0].to_string(), FeatureVector(values));
    }
    Ok(out)
}
