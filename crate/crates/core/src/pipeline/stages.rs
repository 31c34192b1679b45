use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::error::Error;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::curve::{f1_vs_trainsize, write_curve};
use super::funnel::FunnelEntry;
use super::map::{parse_cell_id, rasterize_map, write_ppm, FeatureRaster};
use super::{Context, Input, PipelineError, Stage};
use crate::features::{extract_all, read_features, read_series, write_features, FeatureVector};
use crate::forest::{evaluate, write_report, Metrics, RandomForestModel};
use crate::geodesy::GeoPoint;
use crate::labeling::{
    ingest_labels, label_images, read_references, read_windows, split_dataset, write_references, CropClass,
    GroundReference, ImageWindows, LabelError, Source, VoteRegistry, N_CLASSES,
};
use crate::landcover::ClassGrid;
use crate::roadnet::{candidates, parse_overpass, read_candidates, write_candidates};
use crate::svclient::{
    estimate_cost, fetch_all, plan_requests, read_requests, subsample, write_requests, FetchError, FetchStatus,
    ImageCache, SvError, TransportRegistry,
};

/// File names of stage outputs inside the working directory.
pub mod artifacts {
    pub const CANDIDATES: &str = "candidates.csv";
    pub const FILTERED: &str = "filtered.csv";
    pub const REQUESTS: &str = "requests.csv";
    pub const CACHE_DIR: &str = "cache";
    pub const MANIFEST: &str = "cache/manifest.csv";
    pub const FETCH_REPORT: &str = "fetch_report.json";
    pub const REFERENCES: &str = "references.csv";
    pub const REFERENCE_FEATURES: &str = "reference_features.csv";
    pub const SPLIT: &str = "split.csv";
    pub const MODEL: &str = "model.bin";
    pub const MODEL_SUMMARY: &str = "model.txt";
    pub const REPORT: &str = "report.csv";
    pub const REPORT_VAL: &str = "report_val.csv";
    pub const CONFUSION: &str = "confusion.csv";
    pub const MAP: &str = "map.asc";
    pub const MAP_PREVIEW: &str = "map.ppm";
    pub const MAP_REPORT: &str = "map_report.csv";
    pub const CURVE: &str = "curve.csv";
    pub const FUNNEL: &str = "funnel.csv";
}

use artifacts as a;

type BoxError = Box<dyn Error + Send + Sync>;

pub(super) fn builtins() -> Vec<Box<dyn Stage>> {
    vec![
        Box::new(Densify),
        Box::new(Filter),
        Box::new(Plan),
        Box::new(Fetch),
        Box::new(Label),
        Box::new(Features),
        Box::new(Train),
        Box::new(Evaluate),
        Box::new(Map),
        Box::new(Curve),
    ]
}

fn wrap<E: Into<BoxError>>(stage: &str) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage: stage.to_string(),
        source: e.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(PipelineError::io(path))
}

/// Write through a temporary file so a failed stage never leaves a
/// half-written artifact behind.
fn write_atomic<F>(stage: &str, path: &Path, f: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), BoxError>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(PipelineError::io(&tmp))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(wrap(stage))?;
    w.flush().map_err(PipelineError::io(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(PipelineError::io(path))
}

fn artifact(ctx: &Context, name: &str, producer: &'static str) -> Input {
    Input::Artifact {
        path: ctx.artifact(name),
        producer,
    }
}

fn load_grid(ctx: &Context, stage: &str, path: &Path) -> Result<ClassGrid, PipelineError> {
    let grid = ClassGrid::read_ascii(open(path)?).map_err(wrap(stage))?;
    grid.validate(&ctx.config.legend()?).map_err(wrap(stage))?;
    Ok(grid)
}

struct Densify;

impl Stage for Densify {
    fn name(&self) -> &'static str {
        "densify"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![Input::External(ctx.external(&ctx.config.paths.roads))]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::CANDIDATES)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let path = ctx.external(&cfg.paths.roads);
        let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
        let mut net = parse_overpass(&text).map_err(wrap(self.name()))?;
        if !cfg.roadnet.highways.is_empty() {
            net = net.retain_highways(&cfg.roadnet.highways);
        }
        log::info!("densify: {} ways", net.ways().len());
        let (cands, dense) = candidates(&net, cfg.roadnet.step_m, cfg.roadnet.field_distance_m, cfg.earth()?);
        write_atomic(self.name(), &ctx.artifact(a::CANDIDATES), |w| Ok(write_candidates(w, &cands)?))?;
        Ok(vec![FunnelEntry::new(
            self.name(),
            "field views",
            2 * dense.generated(),
            2 * cands.len(),
        )])
    }
}

struct Filter;

impl Stage for Filter {
    fn name(&self) -> &'static str {
        "filter"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![
            artifact(ctx, a::CANDIDATES, "densify"),
            Input::External(ctx.external(&ctx.config.paths.landcover)),
        ]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::FILTERED)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let grid = load_grid(ctx, self.name(), &ctx.external(&cfg.paths.landcover))?;
        let cands = read_candidates(open(&ctx.artifact(a::CANDIDATES))?).map_err(wrap(self.name()))?;
        let (kept, stats) = crate::landcover::filter_candidates(
            &cands,
            &grid,
            &cfg.legend()?,
            cfg.landcover.radius_m,
            cfg.earth()?,
        );
        if stats.out_of_bounds > 0 {
            log::warn!("filter: {} field points fall outside the land-cover grid", stats.out_of_bounds);
        }
        write_atomic(self.name(), &ctx.artifact(a::FILTERED), |w| Ok(write_candidates(w, &kept)?))?;
        Ok(vec![FunnelEntry::new(
            self.name(),
            "land cover",
            stats.input_field_points,
            stats.kept_field_points,
        )])
    }
}

struct Plan;

impl Stage for Plan {
    fn name(&self) -> &'static str {
        "plan"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![artifact(ctx, a::FILTERED, "filter")]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::REQUESTS)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let cands = read_candidates(open(&ctx.artifact(a::FILTERED))?).map_err(wrap(self.name()))?;
        let views: usize = cands.iter().map(|c| c.surviving_sides()).sum();
        let mut plan = plan_requests(&cands, cfg.window()?, cfg.streetview.image_size);
        if cfg.streetview.max_requests > 0 {
            plan = subsample(plan, cfg.streetview.max_requests, cfg.seed);
        }
        let budget = cfg.streetview.budget();
        match estimate_cost(plan.len() as u64, &budget) {
            Ok(cost) => log::info!("plan: {} requests, estimated cost {cost}", plan.len()),
            Err(e) => log::warn!("plan: {e}; fetch will stop at the cap"),
        }
        write_atomic(self.name(), &ctx.artifact(a::REQUESTS), |w| Ok(write_requests(w, &plan)?))?;
        Ok(vec![FunnelEntry::new(self.name(), "requests", views, plan.len())])
    }
}

struct Fetch;

impl Stage for Fetch {
    fn name(&self) -> &'static str {
        "fetch"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![artifact(ctx, a::REQUESTS, "plan")]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::MANIFEST), ctx.artifact(a::FETCH_REPORT)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config.streetview;
        let plan = read_requests(open(&ctx.artifact(a::REQUESTS))?).map_err(wrap(self.name()))?;
        let transport = TransportRegistry::with_builtins()
            .build(&cfg.transport, &cfg.transport_settings())
            .map_err(|e| match e {
                SvError::UnknownTransport(_) => PipelineError::Config(e.to_string()),
                other => wrap(self.name())(other),
            })?;
        let mut cache = ImageCache::open(ctx.artifact(a::CACHE_DIR)).map_err(wrap(self.name()))?;
        let result = fetch_all(&plan, transport.as_ref(), &mut cache, &cfg.fetch_options());
        cache.compact().map_err(wrap(self.name()))?;
        let report = match result {
            Ok(r) => r,
            Err(FetchError::BudgetHalt { report, source }) => {
                log::error!(
                    "fetch: budget reached after {} images; {} requests left",
                    report.fetched,
                    report.skipped
                );
                return Err(PipelineError::Budget {
                    stage: self.name().to_string(),
                    source: Box::new(source),
                });
            }
            Err(FetchError::Sv(e)) => return Err(wrap(self.name())(e)),
        };
        log::info!(
            "fetch: {} fetched, {} cached, {} unavailable, {} failed, {} outside the season, spend {}",
            report.fetched,
            report.cached,
            report.unavailable,
            report.failed,
            report.excluded,
            report.spend
        );
        write_atomic(self.name(), &ctx.artifact(a::FETCH_REPORT), |w| {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            Ok(writeln!(w)?)
        })?;
        Ok(vec![FunnelEntry::new(self.name(), "usable images", report.planned, report.usable())])
    }
}

struct Label;

impl Stage for Label {
    fn name(&self) -> &'static str {
        "label"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        let mut v = vec![
            artifact(ctx, a::REQUESTS, "plan"),
            artifact(ctx, a::MANIFEST, "fetch"),
            Input::External(ctx.external(&ctx.config.paths.windows)),
        ];
        if let Some(p) = &ctx.config.paths.expert_labels {
            v.push(Input::External(ctx.external(p)));
        }
        v
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::REFERENCES)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let plan = read_requests(open(&ctx.artifact(a::REQUESTS))?).map_err(wrap(self.name()))?;
        let fields: HashMap<String, GeoPoint> = plan.iter().map(|r| (r.request_id.clone(), r.field)).collect();
        let cache = ImageCache::open(ctx.artifact(a::CACHE_DIR)).map_err(wrap(self.name()))?;
        let usable: BTreeSet<&str> = cache
            .entries()
            .filter(|e| e.status == FetchStatus::Ok && fields.contains_key(&e.request_id))
            .map(|e| e.request_id.as_str())
            .collect();
        let all_windows = read_windows(
            open(&ctx.external(&cfg.paths.windows))?,
            cfg.labeling.window_px,
            cfg.streetview.image_size,
        )
        .map_err(wrap(self.name()))?;
        let total_windows = all_windows.len();
        let windows: ImageWindows = all_windows
            .into_iter()
            .filter(|(id, _)| usable.contains(id.as_str()))
            .collect();
        if windows.len() < total_windows {
            log::warn!(
                "label: ignoring window predictions for {} images that are not usable fetches",
                total_windows - windows.len()
            );
        }
        let rule = VoteRegistry::with_builtins()
            .build(&cfg.labeling.rule, cfg.labeling.tau)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let outcome = label_images(&windows, &fields, rule.as_ref()).map_err(wrap(self.name()))?;
        let mut refs = outcome.references;
        let mut funnel = vec![
            FunnelEntry::new(self.name(), "field images", usable.len(), windows.len()),
            FunnelEntry::new(self.name(), "vote", windows.len(), refs.len()),
        ];
        if let Some(p) = &cfg.paths.expert_labels {
            let expert = ingest_labels(open(&ctx.external(p))?, Source::Expert).map_err(wrap(self.name()))?;
            funnel.push(FunnelEntry::new(self.name(), "expert labels", refs.len(), refs.len() + expert.len()));
            refs.extend(expert);
        }
        log::info!("label: {} references, {} images rejected", refs.len(), outcome.rejected);
        write_atomic(self.name(), &ctx.artifact(a::REFERENCES), |w| Ok(write_references(w, &refs)?))?;
        Ok(funnel)
    }
}

struct Features;

impl Stage for Features {
    fn name(&self) -> &'static str {
        "features"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![
            artifact(ctx, a::REFERENCES, "label"),
            Input::External(ctx.external(&ctx.config.paths.reference_series)),
        ]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::REFERENCE_FEATURES)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let refs = read_references(open(&ctx.artifact(a::REFERENCES))?).map_err(wrap(self.name()))?;
        let ids: BTreeSet<&str> = refs.iter().map(|r| r.image_id.as_str()).collect();
        let series = read_series(open(&ctx.external(&cfg.paths.reference_series))?).map_err(wrap(self.name()))?;
        let needed: BTreeMap<String, _> = series.into_iter().filter(|(id, _)| ids.contains(id.as_str())).collect();
        if needed.len() < ids.len() {
            log::warn!("features: {} references have no time series", ids.len() - needed.len());
        }
        let table = extract_all(&needed, &cfg.features).map_err(|e| PipelineError::Config(e.to_string()))?;
        for (id, e) in table.failures.iter().take(10) {
            log::warn!("features: {id}: {e}");
        }
        if table.failures.len() > 10 {
            log::warn!("features: {} more extraction failures", table.failures.len() - 10);
        }
        let n = cfg.features.n_features();
        write_atomic(self.name(), &ctx.artifact(a::REFERENCE_FEATURES), |w| {
            Ok(write_features(w, &table.rows, n)?)
        })?;
        let kept = refs.iter().filter(|r| table.rows.contains_key(&r.image_id)).count();
        Ok(vec![FunnelEntry::new(self.name(), "harmonic fit", refs.len(), kept)])
    }
}

const SPLIT_HEADER: [&str; 2] = ["image_id", "split"];
const PARTS: [&str; 3] = ["train", "val", "test"];

/// Labeled feature rows of one split part, in split-file order.
struct Dataset {
    ids: Vec<String>,
    x: Vec<FeatureVector>,
    y: Vec<CropClass>,
}

fn read_split(path: &Path) -> Result<Vec<(String, String)>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let bad = |m: String| PipelineError::Stage {
        stage: "split".into(),
        source: m.into(),
    };
    if rdr.headers().map_err(|e| bad(e.to_string()))?.iter().ne(SPLIT_HEADER) {
        return Err(bad(format!("{}: unexpected header", path.display())));
    }
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| bad(e.to_string()))?;
            Ok((r[0].to_string(), r[1].to_string()))
        })
        .collect()
}

fn load_parts(ctx: &Context, stage: &str) -> Result<BTreeMap<&'static str, Dataset>, PipelineError> {
    let refs = read_references(open(&ctx.artifact(a::REFERENCES))?).map_err(wrap(stage))?;
    let labels: HashMap<String, CropClass> = refs.into_iter().map(|r| (r.image_id, r.label)).collect();
    let feats = read_features(open(&ctx.artifact(a::REFERENCE_FEATURES))?).map_err(wrap(stage))?;
    let mut parts: BTreeMap<&'static str, Dataset> = PARTS
        .iter()
        .map(|p| (*p, Dataset { ids: vec![], x: vec![], y: vec![] }))
        .collect();
    for (id, part) in read_split(&ctx.artifact(a::SPLIT))? {
        let (Some(label), Some(f)) = (labels.get(&id), feats.get(&id)) else {
            return Err(wrap(stage)(format!("split lists {id}, which has no reference or features")));
        };
        let Some(d) = PARTS.iter().find(|p| **p == part).and_then(|p| parts.get_mut(p)) else {
            return Err(wrap(stage)(format!("unknown split part {part:?}")));
        };
        d.ids.push(id);
        d.x.push(f.clone());
        d.y.push(*label);
    }
    Ok(parts)
}

fn load_model(ctx: &Context, stage: &str) -> Result<RandomForestModel, PipelineError> {
    let path = ctx.artifact(a::MODEL);
    let bytes = fs::read(&path).map_err(PipelineError::io(&path))?;
    RandomForestModel::from_bytes(&bytes).map_err(wrap(stage))
}

struct Train;

impl Stage for Train {
    fn name(&self) -> &'static str {
        "train"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![
            artifact(ctx, a::REFERENCES, "label"),
            artifact(ctx, a::REFERENCE_FEATURES, "features"),
        ]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::SPLIT), ctx.artifact(a::MODEL), ctx.artifact(a::MODEL_SUMMARY)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let refs = read_references(open(&ctx.artifact(a::REFERENCES))?).map_err(wrap(self.name()))?;
        let feats = read_features(open(&ctx.artifact(a::REFERENCE_FEATURES))?).map_err(wrap(self.name()))?;
        let with_features: Vec<GroundReference> =
            refs.into_iter().filter(|r| feats.contains_key(&r.image_id)).collect();
        let n_in = with_features.len();
        let split = split_dataset(
            with_features,
            cfg.split()?,
            cfg.seed,
            cfg.labeling.min_separation_m,
            cfg.earth()?,
        );
        let n_out = split.train.len() + split.val.len() + split.test.len();
        log::info!(
            "train: {} train, {} validation, {} test references",
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        write_atomic(self.name(), &ctx.artifact(a::SPLIT), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(SPLIT_HEADER)?;
            for (part, rows) in PARTS.iter().zip([&split.train, &split.val, &split.test]) {
                for r in rows {
                    out.write_record([r.image_id.as_str(), part])?;
                }
            }
            Ok(out.flush()?)
        })?;
        if split.train.is_empty() {
            return Err(wrap(self.name())(LabelError::NoWindows.to_string() + ": no training references"));
        }
        let x: Vec<&[f64]> = split.train.iter().map(|r| feats[&r.image_id].as_slice()).collect();
        let y: Vec<CropClass> = split.train.iter().map(|r| r.label).collect();
        let model = RandomForestModel::train(&x, &y, &cfg.forest_params()).map_err(wrap(self.name()))?;
        let bytes = model.to_bytes();
        write_atomic(self.name(), &ctx.artifact(a::MODEL), |w| Ok(w.write_all(&bytes)?))?;
        let summary = model.summary();
        write_atomic(self.name(), &ctx.artifact(a::MODEL_SUMMARY), |w| Ok(w.write_all(summary.as_bytes())?))?;
        Ok(vec![FunnelEntry::new(self.name(), "min separation", n_in, n_out)])
    }
}

fn write_confusion<W: Write>(w: W, m: &Metrics) -> Result<(), BoxError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["truth".to_string()];
    header.extend(CropClass::ALL.iter().map(|c| c.name().to_string()));
    out.write_record(&header)?;
    for (k, row) in m.confusion.iter().enumerate() {
        let mut rec = vec![CropClass::ALL[k].name().to_string()];
        rec.extend(row.iter().map(u64::to_string));
        out.write_record(&rec)?;
    }
    Ok(out.flush()?)
}

struct Evaluate;

impl Stage for Evaluate {
    fn name(&self) -> &'static str {
        "evaluate"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![
            artifact(ctx, a::MODEL, "train"),
            artifact(ctx, a::SPLIT, "train"),
            artifact(ctx, a::REFERENCES, "label"),
            artifact(ctx, a::REFERENCE_FEATURES, "features"),
        ]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::REPORT), ctx.artifact(a::REPORT_VAL), ctx.artifact(a::CONFUSION)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let model = load_model(ctx, self.name())?;
        let parts = load_parts(ctx, self.name())?;
        let test = &parts["test"];
        let m = evaluate(&model, &test.x, &test.y).map_err(wrap(self.name()))?;
        log::info!(
            "evaluate: test accuracy {:.4}, macro F1 {:.4}, weighted F1 {:.4} over {} references",
            m.overall_accuracy,
            m.macro_f1,
            m.weighted_f1,
            test.ids.len()
        );
        write_atomic(self.name(), &ctx.artifact(a::REPORT), |w| Ok(write_report(w, &m)?))?;
        write_atomic(self.name(), &ctx.artifact(a::CONFUSION), |w| write_confusion(w, &m))?;
        let val = &parts["val"];
        let _ = fs::remove_file(ctx.artifact(a::REPORT_VAL));
        if !val.x.is_empty() {
            let mv = evaluate(&model, &val.x, &val.y).map_err(wrap(self.name()))?;
            write_atomic(self.name(), &ctx.artifact(a::REPORT_VAL), |w| Ok(write_report(w, &mv)?))?;
        }
        Ok(vec![])
    }
}

struct Map;

impl Stage for Map {
    fn name(&self) -> &'static str {
        "map"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        let p = &ctx.config.paths;
        let mut v = vec![
            artifact(ctx, a::MODEL, "train"),
            Input::External(ctx.external(&p.landcover)),
            Input::External(ctx.external(&p.map_series)),
        ];
        if let Some(t) = &p.truth {
            v.push(Input::External(ctx.external(t)));
        }
        v
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::MAP), ctx.artifact(a::MAP_PREVIEW), ctx.artifact(a::MAP_REPORT)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let model = load_model(ctx, self.name())?;
        let legend = cfg.legend()?;
        let grid = load_grid(ctx, self.name(), &ctx.external(&cfg.paths.landcover))?;
        let series = read_series(open(&ctx.external(&cfg.paths.map_series))?).map_err(wrap(self.name()))?;
        let mut foreign = 0usize;
        let cells: BTreeMap<String, _> = series
            .into_iter()
            .filter(|(id, _)| match parse_cell_id(id) {
                Some((r, c)) => grid.get(r, c) == Some(legend.cropland),
                None => {
                    foreign += 1;
                    false
                }
            })
            .collect();
        if foreign > 0 {
            log::warn!("map: ignored {foreign} series whose id is not a grid cell");
        }
        let table = extract_all(&cells, &cfg.features).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut raster = FeatureRaster::empty(grid.nrows(), grid.ncols());
        for (id, v) in table.rows {
            let (r, c) = parse_cell_id(&id).expect("filtered above");
            raster.set(r, c, v);
        }
        let (map, stats) = rasterize_map(&model, &raster, &grid, &legend).map_err(wrap(self.name()))?;
        log::info!(
            "map: {} of {} cropland cells classified, {} without usable time series",
            stats.classified,
            stats.cropland,
            stats.missing_features
        );
        write_atomic(self.name(), &ctx.artifact(a::MAP), |w| Ok(map.write_ascii(w)?))?;
        write_atomic(self.name(), &ctx.artifact(a::MAP_PREVIEW), |w| Ok(write_ppm(w, &map, 4)?))?;
        let _ = fs::remove_file(ctx.artifact(a::MAP_REPORT));
        if let Some(t) = &cfg.paths.truth {
            let truth = ClassGrid::read_ascii(open(&ctx.external(t))?).map_err(wrap(self.name()))?;
            if !truth.same_shape(&map) {
                return Err(wrap(self.name())("truth raster does not align with the land-cover grid"));
            }
            let mut y_true = Vec::new();
            let mut y_pred = Vec::new();
            let mut unmapped = 0usize;
            for r in 0..truth.nrows() {
                for c in 0..truth.ncols() {
                    let Some(t) = truth.get(r, c).and_then(|v| CropClass::from_index(v as usize)) else { continue };
                    match map.get(r, c).and_then(|v| CropClass::from_index(v as usize)) {
                        Some(p) => {
                            y_true.push(t);
                            y_pred.push(p);
                        }
                        None => unmapped += 1,
                    }
                }
            }
            if unmapped > 0 {
                log::warn!("map: {unmapped} truth cells have no mapped class");
            }
            let m = Metrics::from_predictions(&y_true, &y_pred);
            log::info!("map: accuracy {:.4}, macro F1 {:.4} against truth", m.overall_accuracy, m.macro_f1);
            write_atomic(self.name(), &ctx.artifact(a::MAP_REPORT), |w| Ok(write_report(w, &m)?))?;
        }
        debug_assert_eq!(N_CLASSES, CropClass::ALL.len());
        Ok(vec![])
    }
}

struct Curve;

impl Stage for Curve {
    fn name(&self) -> &'static str {
        "curve"
    }

    fn inputs(&self, ctx: &Context) -> Vec<Input> {
        vec![
            artifact(ctx, a::SPLIT, "train"),
            artifact(ctx, a::REFERENCES, "label"),
            artifact(ctx, a::REFERENCE_FEATURES, "features"),
        ]
    }

    fn outputs(&self, ctx: &Context) -> Vec<PathBuf> {
        vec![ctx.artifact(a::CURVE)]
    }

    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError> {
        let cfg = &ctx.config;
        let parts = load_parts(ctx, self.name())?;
        let (train, test) = (&parts["train"], &parts["test"]);
        let points = f1_vs_trainsize(
            &train.x,
            &train.y,
            &test.x,
            &test.y,
            &cfg.curve.sizes,
            cfg.curve.repeats,
            &cfg.forest_params(),
        )
        .map_err(wrap(self.name()))?;
        write_atomic(self.name(), &ctx.artifact(a::CURVE), |w| Ok(write_curve(w, &points)?))?;
        Ok(vec![])
    }
}
