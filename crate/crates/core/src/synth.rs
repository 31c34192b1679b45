//! A desk-scale synthetic country: a grid road network, a land-cover raster
//! with a crop-type truth layer, scripted window predictions for the street
//! images the pipeline would fetch, and satellite time series whose crop
//! classes follow distinct phenology curves.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::features::{
    extract_features, write_series, Band, BandSample, BandSeries, FeatureError, FeatureVector, HarmonicConfig,
    PointSeries,
};
use crate::labeling::{
    label_images, sliding_windows, split_dataset, write_windows, CropClass, ImageWindows, WindowPrediction,
    N_CLASSES,
};
use crate::landcover::{filter_candidates, ClassGrid, NODATA_BYTE};
use crate::pipeline::{cell_id, PipelineConfig, PipelineError};
use crate::roadnet::{candidates, parse_overpass};
use crate::svclient::{plan_requests, subsample, Fetched, SyntheticTransport};

pub const TREE: u8 = 10;
pub const GRASS: u8 = 30;
pub const CROPLAND: u8 = 40;
pub const BUILT_UP: u8 = 50;

/// Per-class phenology: green-up peak day, peak width (days), greenness
/// amplitude and a SWIR offset (flooded rice paddies are dark in SWIR).
const PHENOLOGY: [(f64, f64, f64, f64); N_CLASSES] = [
    (115.0, 28.0, 1.0, -0.06),
    (150.0, 55.0, 0.55, 0.03),
    (65.0, 22.0, 0.85, 0.0),
    (95.0, 70.0, 0.75, -0.02),
    (35.0, 35.0, 0.3, 0.05),
];

/// Bands written to time-series files; GCVI is derived from NIR and Green.
pub const RAW_BANDS: [Band; 5] = [Band::RedEdge4, Band::Swir1, Band::Swir2, Band::Nir, Band::Green];

/// Generator of class-specific reflectance time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureModel {
    pub season_days: f64,
    pub cadence_days: f64,
    /// Standard deviation of additive noise on every clear observation.
    pub obs_sigma: f64,
    /// Standard deviation of the per-point shift of the green-up peak.
    pub phase_jitter_days: f64,
    /// Standard deviation of the per-point relative amplitude change.
    pub amp_jitter: f64,
    pub cloud_fraction: f64,
}

impl Default for SignatureModel {
    fn default() -> Self {
        Self {
            season_days: 184.0,
            cadence_days: 8.0,
            obs_sigma: 0.015,
            phase_jitter_days: 8.0,
            amp_jitter: 0.1,
            cloud_fraction: 0.2,
        }
    }
}

impl SignatureModel {
    /// Noisier observations and wider per-field variation, so that classes
    /// overlap and small training sets visibly underfit.
    pub fn hard() -> Self {
        Self {
            obs_sigma: 0.08,
            phase_jitter_days: 25.0,
            amp_jitter: 0.4,
            ..Self::default()
        }
    }

    /// Noise-free reflectance of `band` at day `t`.
    pub fn reflectance(class: CropClass, band: Band, t: f64, phase: f64, amp: f64) -> f64 {
        let (peak, width, a, swir) = PHENOLOGY[class.index()];
        let x = (t - peak - phase) / width;
        let s = amp * a * (-0.5 * x * x).exp();
        match band {
            Band::Green => 0.09 - 0.02 * s,
            Band::Nir => 0.18 + 0.30 * s,
            Band::RedEdge4 => 0.17 + 0.24 * s,
            Band::Swir1 => 0.26 + swir - 0.10 * s,
            Band::Swir2 => 0.19 + 0.8 * swir - 0.08 * s,
            Band::Gcvi => (0.18 + 0.30 * s) / (0.09 - 0.02 * s) - 1.0,
        }
    }

    /// One point's raw-band series. Cloudy acquisitions are brightened and
    /// carry a cloud probability above any sensible mask threshold.
    pub fn sample_series<R: Rng>(&self, class: CropClass, rng: &mut R) -> PointSeries {
        let noise = Normal::new(0.0, self.obs_sigma.max(0.0)).expect("finite sigma");
        let phase = Normal::new(0.0, self.phase_jitter_days.max(0.0)).expect("finite jitter").sample(rng);
        let amp = 1.0 + Normal::new(0.0, self.amp_jitter.max(0.0)).expect("finite jitter").sample(rng);
        let start = rng.gen_range(0.0..self.cadence_days);
        let mut samples: BTreeMap<Band, Vec<BandSample>> = RAW_BANDS.iter().map(|b| (*b, Vec::new())).collect();
        let mut t = start;
        while t <= self.season_days {
            let day = round5(t);
            let cloudy = rng.gen_bool(self.cloud_fraction.clamp(0.0, 1.0));
            let cloud_prob = if cloudy { rng.gen_range(50.0..100.0) } else { rng.gen_range(0.0..30.0) };
            for band in RAW_BANDS {
                let mut v = Self::reflectance(class, band, day, phase, amp) + noise.sample(rng);
                if cloudy {
                    v += 0.2;
                }
                samples.get_mut(&band).expect("raw band").push(BandSample {
                    t: day,
                    value: round5(v.max(0.001)),
                    cloud_prob: round5(cloud_prob),
                });
            }
            t += self.cadence_days;
        }
        samples
            .into_iter()
            .map(|(b, s)| (b, BandSeries::new(b, s).expect("increasing distinct times")))
            .collect()
    }

    pub fn sample_features<R: Rng>(
        &self,
        class: CropClass,
        cfg: &HarmonicConfig,
        rng: &mut R,
    ) -> Result<FeatureVector, FeatureError> {
        extract_features(&self.sample_series(class, rng), cfg)
    }
}

fn round5(v: f64) -> f64 {
    (v * 1e5).round() / 1e5
}

/// Labeled feature vectors drawn from `model`, classes following `priors`.
/// A `label_noise` fraction of labels is replaced by a different class.
pub fn labeled_features(
    n: usize,
    priors: [f64; N_CLASSES],
    label_noise: f64,
    model: &SignatureModel,
    cfg: &HarmonicConfig,
    seed: u64,
) -> (Vec<FeatureVector>, Vec<CropClass>, Vec<CropClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while x.len() < n {
        let class = draw_class(&priors, &mut rng);
        let Ok(f) = model.sample_features(class, cfg, &mut rng) else { continue };
        let label = if rng.gen_bool(label_noise.clamp(0.0, 1.0)) { other_class(class, &mut rng) } else { class };
        x.push(f);
        truth.push(class);
        labels.push(label);
    }
    (x, truth, labels)
}

fn draw_class<R: Rng>(priors: &[f64; N_CLASSES], rng: &mut R) -> CropClass {
    let total: f64 = priors.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, p) in priors.iter().enumerate() {
        if u < *p {
            return CropClass::ALL[k];
        }
        u -= p;
    }
    CropClass::Other
}

fn other_class<R: Rng>(class: CropClass, rng: &mut R) -> CropClass {
    let k = (class.index() + rng.gen_range(1..N_CLASSES)) % N_CLASSES;
    CropClass::ALL[k]
}

/// Shape of the synthetic country.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    /// Grid cells per side.
    pub size: usize,
    pub cellsize_deg: f64,
    /// South-west corner (lat, lon).
    pub origin: (f64, f64),
    /// Cells between parallel roads.
    pub road_spacing: usize,
    pub class_priors: [f64; N_CLASSES],
    /// Images whose windows mostly and confidently show the true crop.
    pub clean_fraction: f64,
    /// Images whose confident windows mostly show a wrong crop.
    pub confused_fraction: f64,
    pub signature: SignatureModel,
    /// Densification step written to the generated configuration.
    pub step_m: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            size: 100,
            cellsize_deg: 0.0003,
            origin: (15.0, 100.5),
            road_spacing: 10,
            class_priors: [0.3, 0.2, 0.15, 0.15, 0.2],
            clean_fraction: 0.84,
            confused_fraction: 0.08,
            signature: SignatureModel::default(),
            step_m: 30.0,
        }
    }
}

/// Counts describing a generated country.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub roads: usize,
    pub cropland_cells: usize,
    pub requests: usize,
    pub images_with_windows: usize,
    pub expected_references: usize,
    pub expected_train: usize,
}

fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

fn is_road(i: usize, opts: &SynthOptions) -> bool {
    i % opts.road_spacing == opts.road_spacing / 2
}

/// Land cover plus a truth layer holding crop class indices on cropland.
pub fn land_cover(opts: &SynthOptions) -> (ClassGrid, ClassGrid) {
    let n = opts.size;
    let sp = opts.road_spacing;
    let half = sp / 2;
    let mut rng = rng_for(opts.seed, "land cover");
    let blocks = n / sp + 2;
    let kinds: Vec<u8> = (0..blocks * blocks)
        .map(|_| match rng.gen_range(0.0..1.0) {
            u if u < 0.70 => CROPLAND,
            u if u < 0.82 => TREE,
            u if u < 0.92 => GRASS,
            _ => BUILT_UP,
        })
        .collect();
    let fields: Vec<CropClass> = (0..blocks * blocks * 4)
        .map(|_| draw_class(&opts.class_priors, &mut rng))
        .collect();
    let mut cover = vec![0u8; n * n];
    let mut truth = vec![NODATA_BYTE; n * n];
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if is_road(r, opts) || is_road(c, opts) {
                cover[i] = BUILT_UP;
                continue;
            }
            let (br, bc) = ((r + half) / sp, (c + half) / sp);
            let kind = kinds[br * blocks + bc];
            if kind != CROPLAND || rng.gen_bool(0.02) {
                cover[i] = if kind == CROPLAND { TREE } else { kind };
                continue;
            }
            let (hr, hc) = (((r + half) % sp) * 2 / sp, ((c + half) % sp) * 2 / sp);
            cover[i] = CROPLAND;
            truth[i] = fields[((br * blocks + bc) * 2 + hr) * 2 + hc].index() as u8;
        }
    }
    let (lat0, lon0) = opts.origin;
    let grid = |cells| ClassGrid::new(n, n, lon0, lat0, opts.cellsize_deg, -9999, cells).expect("valid geometry");
    (grid(cover), grid(truth))
}

/// Overpass-style JSON for a grid of roads through cell centers. Crossing
/// roads share their intersection node.
pub fn road_network(opts: &SynthOptions, grid: &ClassGrid) -> (String, usize) {
    let n = opts.size;
    let lines: Vec<usize> = (0..n).filter(|&i| is_road(i, opts)).collect();
    let node_id = |r: usize, c: usize| (r * n + c + 1) as i64;
    let mut used = std::collections::BTreeSet::new();
    let mut ways = Vec::new();
    let mut way_id = 1i64;
    for &fixed in &lines {
        for horizontal in [true, false] {
            let mut stops = vec![0];
            stops.extend(lines.iter().copied());
            stops.push(n - 1);
            stops.dedup();
            let nodes: Vec<i64> = stops
                .iter()
                .map(|&k| {
                    let (r, c) = if horizontal { (fixed, k) } else { (k, fixed) };
                    used.insert((r, c));
                    node_id(r, c)
                })
                .collect();
            let tag = if way_id % 3 == 0 { "tertiary" } else { "unclassified" };
            ways.push(json!({"type": "way", "id": way_id, "nodes": nodes, "tags": {"highway": tag}}));
            way_id += 1;
        }
    }
    let mut elements: Vec<serde_json::Value> = used
        .iter()
        .map(|&(r, c)| {
            let p = grid.cell_center(r, c);
            json!({"type": "node", "id": node_id(r, c), "lat": p.lat(), "lon": p.lon()})
        })
        .collect();
    let n_ways = ways.len();
    elements.extend(ways);
    let doc = json!({"version": 0.6, "generator": "cropref synth", "elements": elements});
    (serde_json::to_string_pretty(&doc).expect("json"), n_ways)
}

fn window_probs<R: Rng>(top: CropClass, p_top: f64, rng: &mut R) -> [f64; N_CLASSES] {
    let mut w = [0.0; N_CLASSES];
    for (k, v) in w.iter_mut().enumerate() {
        if k != top.index() {
            *v = rng.gen_range(0.05..1.0);
        }
    }
    let sum: f64 = w.iter().sum();
    let mut probs = [0.0; N_CLASSES];
    for k in 0..N_CLASSES {
        if k != top.index() {
            probs[k] = (w[k] / sum * (1.0 - p_top) * 1e6).round() / 1e6;
        }
    }
    probs[top.index()] = 1.0 - probs.iter().sum::<f64>();
    probs
}

/// Scripted per-window predictions for one image of a field of `class`.
fn image_windows<R: Rng>(class: CropClass, opts: &SynthOptions, image_size: u32, cfg: &PipelineConfig, rng: &mut R) -> Vec<WindowPrediction> {
    let u = rng.gen_range(0.0..1.0);
    let (label, confident) = if u < opts.clean_fraction {
        (class, 0.75)
    } else if u < opts.clean_fraction + opts.confused_fraction {
        (other_class(class, rng), 0.75)
    } else {
        (class, 0.0)
    };
    let rects = sliding_windows(image_size, image_size, cfg.labeling.window_px, cfg.labeling.stride_px)
        .expect("image larger than window");
    rects
        .into_iter()
        .map(|rect| {
            let v = rng.gen_range(0.0..1.0);
            let (top, p) = if v < confident {
                (label, rng.gen_range(0.92..0.99))
            } else if v < confident + 0.08 {
                (other_class(label, rng), rng.gen_range(0.92..0.99))
            } else {
                (label, rng.gen_range(0.3..0.85))
            };
            WindowPrediction::new(rect, window_probs(top, p, rng)).expect("probabilities sum to one")
        })
        .collect()
}

fn write_file<F>(path: &Path, f: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), Box<dyn std::error::Error + Send + Sync>>,
{
    let file = File::create(path).map_err(PipelineError::io(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|source| PipelineError::Stage {
        stage: "synth".into(),
        source,
    })?;
    w.flush().map_err(PipelineError::io(path))
}

/// Write a complete synthetic country into `dir`, including `config.toml`
/// pointing at the generated inputs and at `truth.asc`.
pub fn write_country(dir: &Path, opts: &SynthOptions) -> Result<SynthSummary, PipelineError> {
    fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    let mut cfg = PipelineConfig::default();
    cfg.seed = opts.seed;
    cfg.region.name = "synthetic".into();
    cfg.roadnet.step_m = opts.step_m;
    cfg.paths.truth = Some(PathBuf::from("truth.asc"));
    cfg.base_dir = dir.to_path_buf();
    let earth = cfg.earth()?;
    let legend = cfg.legend()?;

    let (cover, truth) = land_cover(opts);
    let (roads_json, n_roads) = road_network(opts, &cover);

    // The pipeline's own first stages decide which images exist.
    let net = parse_overpass(&roads_json).map_err(|e| PipelineError::Config(e.to_string()))?;
    let (cands, _) = candidates(&net, cfg.roadnet.step_m, cfg.roadnet.field_distance_m, earth);
    let (kept, _) = filter_candidates(&cands, &cover, &legend, cfg.landcover.radius_m, earth);
    let mut plan = plan_requests(&kept, cfg.window()?, cfg.streetview.image_size);
    if cfg.streetview.max_requests > 0 {
        plan = subsample(plan, cfg.streetview.max_requests, cfg.seed);
    }
    let transport = SyntheticTransport::from_settings(&cfg.streetview.transport_settings());

    let mut windows = ImageWindows::new();
    let mut usable = ImageWindows::new();
    let mut ref_series = BTreeMap::new();
    let mut fields = HashMap::new();
    for req in &plan {
        let Fetched::Image { capture_date, .. } = transport.resolve(req) else { continue };
        let Some((r, c)) = cover.cell_of(req.field) else { continue };
        let Some(class) = truth.get(r, c).and_then(|k| CropClass::from_index(k as usize)) else { continue };
        let mut rng = rng_for(opts.seed, &req.request_id);
        let preds = image_windows(class, opts, req.size, &cfg, &mut rng);
        if req.window.contains(capture_date) {
            usable.insert(req.request_id.clone(), preds.clone());
        }
        windows.insert(req.request_id.clone(), preds);
        ref_series.insert(req.request_id.clone(), opts.signature.sample_series(class, &mut rng));
        fields.insert(req.request_id.clone(), req.field);
    }

    let mut map_series = BTreeMap::new();
    for r in 0..truth.nrows() {
        for c in 0..truth.ncols() {
            if let Some(class) = truth.get(r, c).and_then(|k| CropClass::from_index(k as usize)) {
                let id = cell_id(r, c);
                let mut rng = rng_for(opts.seed, &id);
                map_series.insert(id, opts.signature.sample_series(class, &mut rng));
            }
        }
    }

    // Size the learning curve to the training split the pipeline will make.
    let rule = crate::labeling::Mhp::new(cfg.labeling.tau).map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcome = label_images(&usable, &fields, &rule).map_err(|e| PipelineError::Config(e.to_string()))?;
    let n_refs = outcome.references.len();
    let split = split_dataset(outcome.references, cfg.split()?, cfg.seed, cfg.labeling.min_separation_m, earth);
    let n_train = split.train.len();
    let mut sizes: Vec<usize> = [16, 8, 4, 2].iter().map(|d| n_train / d).collect();
    sizes.push(n_train * 9 / 10);
    sizes.retain(|&s| s >= 5);
    sizes.dedup();
    cfg.curve.sizes = sizes;

    write_file(&dir.join(&cfg.paths.roads), |w| Ok(w.write_all(roads_json.as_bytes())?))?;
    write_file(&dir.join(&cfg.paths.landcover), |w| Ok(cover.write_ascii(w)?))?;
    write_file(&dir.join("truth.asc"), |w| Ok(truth.write_ascii(w)?))?;
    write_file(&dir.join(&cfg.paths.windows), |w| Ok(write_windows(w, &windows)?))?;
    write_file(&dir.join(&cfg.paths.reference_series), |w| Ok(write_series(w, &ref_series)?))?;
    write_file(&dir.join(&cfg.paths.map_series), |w| Ok(write_series(w, &map_series)?))?;
    let toml = cfg.to_toml();
    write_file(&dir.join("config.toml"), |w| Ok(w.write_all(toml.as_bytes())?))?;

    Ok(SynthSummary {
        roads: n_roads,
        cropland_cells: map_series.len(),
        requests: plan.len(),
        images_with_windows: windows.len(),
        expected_references: n_refs,
        expected_train: n_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::landcover::ClassLegend;

    #[test]
    fn land_cover_codes_and_truth_agree() {
        let opts = SynthOptions {
            size: 40,
            ..Default::default()
        };
        let (cover, truth) = land_cover(&opts);
        cover.validate(&ClassLegend::worldcover()).unwrap();
        for r in 0..40 {
            for c in 0..40 {
                assert_eq!(cover.get(r, c) == Some(CROPLAND), truth.get(r, c).is_some(), "cell {r},{c}");
            }
        }
        assert_eq!(cover.get(5, 7), Some(BUILT_UP));
        assert_eq!(land_cover(&opts), (cover, truth));
    }

    #[test]
    fn roads_parse_with_shared_intersections() {
        let opts = SynthOptions {
            size: 30,
            ..Default::default()
        };
        let (cover, _) = land_cover(&opts);
        let (doc, n) = road_network(&opts, &cover);
        let net = parse_overpass(&doc).unwrap();
        assert_eq!(n, 6);
        assert_eq!(net.ways().len(), 6);
        let h = &net.ways()[0].nodes();
        let v = &net.ways()[1].nodes();
        assert!(h.iter().any(|p| v.contains(p)));
    }

    #[test]
    fn window_probabilities_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = window_probs(CropClass::Maize, rng.gen_range(0.3..0.99), &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn series_support_feature_extraction() {
        let model = SignatureModel::default();
        let cfg = HarmonicConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for class in CropClass::ALL {
            let s = model.sample_series(class, &mut rng);
            assert_eq!(s.len(), RAW_BANDS.len());
            assert!(s[&Band::Nir].len() >= 20);
            assert_eq!(extract_features(&s, &cfg).unwrap().len(), cfg.n_features());
        }
    }

    #[test]
    fn label_noise_rate() {
        let model = SignatureModel::default();
        let (x, truth, labels) =
            labeled_features(400, [0.2; N_CLASSES], 0.1, &model, &HarmonicConfig::default(), 3);
        assert_eq!(x.len(), 400);
        let flipped = truth.iter().zip(&labels).filter(|(a, b)| a != b).count();
        assert!((20..=60).contains(&flipped), "{flipped}");
    }
}
