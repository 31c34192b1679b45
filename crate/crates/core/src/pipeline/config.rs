use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::features::HarmonicConfig;
use crate::forest::ForestParams;
use crate::geodesy::{EarthModel, MEAN_EARTH_RADIUS_M};
use crate::labeling::{SplitFractions, DEFAULT_STRIDE, DEFAULT_TAU, DEFAULT_WINDOW};
use crate::landcover::{ClassLegend, DEFAULT_RADIUS_M};
use crate::roadnet::{DEFAULT_FIELD_DISTANCE_M, DEFAULT_STEP_M};
use crate::svclient::{Budget, DateWindow, FetchOptions, RetryPolicy, TransportSettings, DEFAULT_IMAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub name: String,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { name: "unnamed".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeasonConfig {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for SeasonConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2022, 5, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2022, 10, 31).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadnetConfig {
    pub step_m: f64,
    pub field_distance_m: f64,
    /// Highway tags to keep; empty keeps every way.
    pub highways: Vec<String>,
    pub earth_radius_m: f64,
}

impl Default for RoadnetConfig {
    fn default() -> Self {
        Self {
            step_m: DEFAULT_STEP_M,
            field_distance_m: DEFAULT_FIELD_DISTANCE_M,
            highways: Vec::new(),
            earth_radius_m: MEAN_EARTH_RADIUS_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandcoverConfig {
    pub radius_m: f64,
    pub cropland: u8,
    pub tree_cover: u8,
    /// Class code (as a string key) to name; empty uses the WorldCover legend.
    pub classes: BTreeMap<String, String>,
}

impl Default for LandcoverConfig {
    fn default() -> Self {
        let wc = ClassLegend::worldcover();
        Self {
            radius_m: DEFAULT_RADIUS_M,
            cropland: wc.cropland,
            tree_cover: wc.tree_cover,
            classes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreetviewConfig {
    pub transport: String,
    pub image_size: u32,
    /// Upper bound on planned requests; 0 plans every field point.
    pub max_requests: usize,
    pub usd_per_1000: f64,
    pub budget_usd: f64,
    /// Requests per second across all workers; 0 disables the limit.
    pub rate_per_sec: f64,
    pub workers: usize,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub retry_max_ms: u64,
    pub api_key_env: String,
    pub base_url: String,
    pub timeout_secs: u64,
    pub synthetic_availability: f64,
    pub synthetic_date_spread_days: i64,
}

impl Default for StreetviewConfig {
    fn default() -> Self {
        let t = TransportSettings::default();
        let r = RetryPolicy::default();
        let b = Budget::default();
        Self {
            transport: "synthetic".into(),
            image_size: DEFAULT_IMAGE_SIZE,
            max_requests: 0,
            usd_per_1000: b.unit_cost_per_1000.cents() as f64 / 100.0,
            budget_usd: b.max.cents() as f64 / 100.0,
            rate_per_sec: 0.0,
            workers: 4,
            retry_attempts: r.attempts,
            retry_base_ms: r.base_delay.as_millis() as u64,
            retry_max_ms: r.max_delay.as_millis() as u64,
            api_key_env: t.api_key_env,
            base_url: t.base_url,
            timeout_secs: t.timeout_secs,
            synthetic_availability: t.synthetic_availability,
            synthetic_date_spread_days: t.synthetic_date_spread_days,
        }
    }
}

impl StreetviewConfig {
    pub fn budget(&self) -> Budget {
        Budget::new(self.usd_per_1000, self.budget_usd)
    }

    pub fn fetch_options(&self) -> FetchOptions {
        FetchOptions {
            rate_per_sec: self.rate_per_sec,
            workers: self.workers,
            budget: self.budget(),
            retry: RetryPolicy {
                attempts: self.retry_attempts,
                base_delay: std::time::Duration::from_millis(self.retry_base_ms),
                max_delay: std::time::Duration::from_millis(self.retry_max_ms),
            },
        }
    }

    pub fn transport_settings(&self) -> TransportSettings {
        TransportSettings {
            api_key_env: self.api_key_env.clone(),
            base_url: self.base_url.clone(),
            timeout_secs: self.timeout_secs,
            synthetic_availability: self.synthetic_availability,
            synthetic_date_spread_days: self.synthetic_date_spread_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub rule: String,
    pub tau: f64,
    pub window_px: u32,
    pub stride_px: u32,
    pub min_separation_m: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            rule: "mhp".into(),
            tau: DEFAULT_TAU,
            window_px: DEFAULT_WINDOW,
            stride_px: DEFAULT_STRIDE,
            min_separation_m: 100.0,
            split: SplitFractions::default().as_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    /// Training-set sizes, each drawn from the training split.
    pub sizes: Vec<usize>,
    /// Independent subsamples per size; F1 is averaged over them.
    pub repeats: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            sizes: vec![25, 50, 100, 200],
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Overpass JSON road network.
    pub roads: PathBuf,
    /// ESRI ASCII land-cover grid.
    pub landcover: PathBuf,
    /// Per-window softmax predictions.
    pub windows: PathBuf,
    /// Satellite time series keyed by image id.
    pub reference_series: PathBuf,
    /// Satellite time series keyed by grid cell (`r<row>_c<col>`).
    pub map_series: PathBuf,
    /// Optional hand labels merged into the references.
    pub expert_labels: Option<PathBuf>,
    /// Optional class raster to score the map against.
    pub truth: Option<PathBuf>,
}

/// Every tunable of a run. Relative paths resolve against the directory of
/// the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub region: RegionConfig,
    pub season: SeasonConfig,
    pub roadnet: RoadnetConfig,
    pub landcover: LandcoverConfig,
    pub streetview: StreetviewConfig,
    pub labeling: LabelingConfig,
    pub features: HarmonicConfig,
    pub forest: ForestParams,
    pub curve: CurveConfig,
    pub paths: PathsConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            region: RegionConfig::default(),
            season: SeasonConfig::default(),
            roadnet: RoadnetConfig::default(),
            landcover: LandcoverConfig::default(),
            streetview: StreetviewConfig::default(),
            labeling: LabelingConfig::default(),
            features: HarmonicConfig::default(),
            forest: ForestParams::default(),
            curve: CurveConfig::default(),
            paths: PathsConfig {
                roads: "roads.json".into(),
                landcover: "landcover.asc".into(),
                windows: "windows.csv".into(),
                reference_series: "reference_series.csv".into(),
                map_series: "map_series.csv".into(),
                expert_labels: None,
                truth: None,
            },
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical byte form used in stage fingerprints.
    pub(crate) fn canonical(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn earth(&self) -> Result<EarthModel, PipelineError> {
        EarthModel::new(self.roadnet.earth_radius_m).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn window(&self) -> Result<DateWindow, PipelineError> {
        DateWindow::new(self.season.start, self.season.end).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn legend(&self) -> Result<ClassLegend, PipelineError> {
        let lc = &self.landcover;
        let names = if lc.classes.is_empty() {
            ClassLegend::worldcover().names
        } else {
            lc.classes
                .iter()
                .map(|(k, v)| {
                    k.trim()
                        .parse::<u8>()
                        .map(|c| (c, v.clone()))
                        .map_err(|e| PipelineError::Config(format!("landcover class code {k:?}: {e}")))
                })
                .collect::<Result<_, _>>()?
        };
        ClassLegend::new(names, lc.cropland, lc.tree_cover).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn split(&self) -> Result<SplitFractions, PipelineError> {
        let [a, b, c] = self.labeling.split;
        SplitFractions::new(a, b, c).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Forest parameters with the run seed applied.
    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            seed: self.seed,
            ..self.forest.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.earth()?;
        self.window()?;
        self.legend()?;
        self.split()?;
        let r = &self.roadnet;
        if !(r.step_m.is_finite() && r.step_m > 0.0) {
            return bad(format!("roadnet.step_m must be positive, got {}", r.step_m));
        }
        if !(r.field_distance_m.is_finite() && r.field_distance_m > 0.0) {
            return bad(format!("roadnet.field_distance_m must be positive, got {}", r.field_distance_m));
        }
        if !(self.landcover.radius_m.is_finite() && self.landcover.radius_m >= 0.0) {
            return bad(format!("landcover.radius_m must be non-negative, got {}", self.landcover.radius_m));
        }
        let l = &self.labeling;
        if !(0.0..=1.0).contains(&l.tau) {
            return bad(format!("labeling.tau must lie in [0, 1], got {}", l.tau));
        }
        if l.window_px == 0 || l.window_px > self.streetview.image_size {
            return bad(format!(
                "labeling.window_px {} must be between 1 and the image size {}",
                l.window_px, self.streetview.image_size
            ));
        }
        if !(l.min_separation_m.is_finite() && l.min_separation_m >= 0.0) {
            return bad(format!("labeling.min_separation_m must be non-negative, got {}", l.min_separation_m));
        }
        let s = &self.streetview;
        if !(s.usd_per_1000 >= 0.0 && s.budget_usd >= 0.0) {
            return bad("streetview costs must be non-negative".into());
        }
        if s.workers == 0 || s.retry_attempts == 0 {
            return bad("streetview.workers and streetview.retry_attempts must be at least 1".into());
        }
        self.features.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.forest
            .validate(self.features.n_features())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.curve.sizes.is_empty() || self.curve.sizes.contains(&0) || self.curve.repeats == 0 {
            return bad("curve.sizes must be non-empty and positive, curve.repeats at least 1".into());
        }
        Ok(())
    }
}
