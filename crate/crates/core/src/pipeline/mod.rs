//! Staged pipeline orchestration.
//!
//! Each stage reads named artifacts from the working directory (or external
//! inputs from the configuration), writes its own artifacts, and reports
//! funnel counts. A stage records a fingerprint of its configuration and
//! inputs under `.stages/`; re-running with an unchanged fingerprint and
//! intact outputs is skipped.

mod config;
mod curve;
mod funnel;
mod map;
mod stages;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    CurveConfig, LabelingConfig, LandcoverConfig, PathsConfig, PipelineConfig, RegionConfig, RoadnetConfig,
    SeasonConfig, StreetviewConfig,
};
pub use curve::{f1_vs_trainsize, read_curve, spearman, write_curve, CurvePoint, CURVE_HEADER};
pub use funnel::{read_funnel, write_funnel, FunnelEntry, FunnelReport, FUNNEL_HEADER};
pub use map::{cell_id, parse_cell_id, rasterize_map, write_ppm, FeatureRaster, MapStats, MAP_NODATA};
pub use stages::artifacts;

/// Stage names in execution order.
pub const STAGE_ORDER: [&str; 10] = [
    "densify", "filter", "plan", "fetch", "label", "features", "train", "evaluate", "map", "curve",
];

const STATE_DIR: &str = ".stages";
const LOCK_FILE: &str = ".cropref.lock";
/// Bumped whenever a stage's output format or semantics change.
const STAGE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage {stage} needs {artifact}, which stage {producer} produces; run it first")]
    Dependency {
        stage: String,
        artifact: PathBuf,
        producer: String,
    },
    #[error("stage {stage}: {source}")]
    Budget {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("working directory {0} is in use by another run (remove the lock file if it is stale)")]
    Locked(PathBuf),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 missing dependency, 4 budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::UnknownStage(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Budget { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path) -> impl Fn(io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A file a stage reads, and who is responsible for it.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    /// Produced by the named upstream stage.
    Artifact { path: PathBuf, producer: &'static str },
    /// Supplied through the configuration.
    External(PathBuf),
}

impl Input {
    pub fn path(&self) -> &Path {
        match self {
            Input::Artifact { path, .. } | Input::External(path) => path,
        }
    }
}

/// Everything a stage can see.
pub struct Context {
    pub config: PipelineConfig,
    pub workdir: PathBuf,
}

impl Context {
    pub fn new(config: PipelineConfig, workdir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            workdir: workdir.into(),
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn external(&self, p: &Path) -> PathBuf {
        self.config.resolve(p)
    }
}

pub trait Stage: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self, ctx: &Context) -> Vec<Input>;
    fn outputs(&self, ctx: &Context) -> Vec<PathBuf>;
    /// Run the stage, returning its funnel rows.
    fn run(&self, ctx: &Context) -> Result<Vec<FunnelEntry>, PipelineError>;
}

/// Stages by name, kept in execution order.
pub struct StageRegistry {
    stages: Vec<Box<dyn Stage>>,
}

impl StageRegistry {
    pub fn empty() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for s in stages::builtins() {
            r.register(s);
        }
        r
    }

    /// Add a stage, replacing any stage of the same name in place.
    pub fn register(&mut self, stage: Box<dyn Stage>) {
        match self.stages.iter().position(|s| s.name() == stage.name()) {
            Some(i) => self.stages[i] = stage,
            None => self.stages.push(stage),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn Stage, PipelineError> {
        self.stages
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| PipelineError::UnknownStage(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.stages.iter().map(|s| s.name())
    }
}

impl Default for StageRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageState {
    fingerprint: String,
    outputs: Vec<(String, String)>,
    funnel: Vec<FunnelEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    /// True when the recorded outputs were reused.
    pub skipped: bool,
    pub funnel: Vec<FunnelEntry>,
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let mut f = File::open(path).map_err(PipelineError::io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(PipelineError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn state_path(ctx: &Context, stage: &str) -> PathBuf {
    ctx.workdir.join(STATE_DIR).join(format!("{stage}.json"))
}

fn read_state(ctx: &Context, stage: &str) -> Option<StageState> {
    let text = fs::read_to_string(state_path(ctx, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

fn fingerprint(stage: &dyn Stage, ctx: &Context, inputs: &[Input]) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(STAGE_FORMAT.to_le_bytes());
    h.update(ctx.config.canonical());
    for input in inputs {
        h.update(input.path().to_string_lossy().as_bytes());
        h.update(hash_file(input.path())?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn outputs_intact(state: &StageState) -> bool {
    state
        .outputs
        .iter()
        .all(|(p, digest)| hash_file(Path::new(p)).map_or(false, |d| &d == digest))
}

/// Run one stage, or reuse its outputs when nothing it depends on changed.
pub fn run_stage(registry: &StageRegistry, name: &str, ctx: &Context) -> Result<StageOutcome, PipelineError> {
    let stage = registry.get(name)?;
    let inputs = stage.inputs(ctx);
    for input in &inputs {
        if input.path().is_file() {
            continue;
        }
        return Err(match input {
            Input::Artifact { path, producer } => PipelineError::Dependency {
                stage: name.to_string(),
                artifact: path.clone(),
                producer: producer.to_string(),
            },
            Input::External(path) => {
                PipelineError::Config(format!("stage {name}: input {} does not exist", path.display()))
            }
        });
    }
    let fp = fingerprint(stage, ctx, &inputs)?;
    if let Some(state) = read_state(ctx, name) {
        if state.fingerprint == fp && outputs_intact(&state) {
            log::info!("{name}: inputs unchanged, reusing outputs");
            return Ok(StageOutcome {
                stage: name.to_string(),
                skipped: true,
                funnel: state.funnel,
            });
        }
    }
    log::info!("{name}: running");
    let _ = fs::remove_file(state_path(ctx, name));
    let funnel = stage.run(ctx)?;
    for e in &funnel {
        log::info!("{name}: {} {} -> {}", e.step, e.input, e.output);
    }
    let outputs = stage
        .outputs(ctx)
        .into_iter()
        .filter(|p| p.is_file())
        .map(|p| Ok((p.to_string_lossy().into_owned(), hash_file(&p)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let state = StageState {
        fingerprint: fp,
        outputs,
        funnel: funnel.clone(),
    };
    let dir = ctx.workdir.join(STATE_DIR);
    fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    let path = state_path(ctx, name);
    fs::write(&path, serde_json::to_vec_pretty(&state).expect("state serializes")).map_err(PipelineError::io(&path))?;
    Ok(StageOutcome {
        stage: name.to_string(),
        skipped: false,
        funnel,
    })
}

/// Funnel rows of every stage that has run, in stage order.
pub fn collect_funnel(registry: &StageRegistry, ctx: &Context) -> FunnelReport {
    FunnelReport {
        entries: registry
            .names()
            .filter_map(|n| read_state(ctx, n))
            .flat_map(|s| s.funnel)
            .collect(),
    }
}

/// Run `names` in order under the working-directory lock and rewrite
/// `funnel.csv` after each stage.
pub fn run_stages(registry: &StageRegistry, names: &[&str], ctx: &Context) -> Result<Vec<StageOutcome>, PipelineError> {
    for n in names {
        registry.get(n)?;
    }
    fs::create_dir_all(&ctx.workdir).map_err(PipelineError::io(&ctx.workdir))?;
    let _lock = WorkdirLock::acquire(&ctx.workdir)?;
    let mut out = Vec::new();
    for n in names {
        let result = run_stage(registry, n, ctx);
        let funnel_path = ctx.artifact(artifacts::FUNNEL);
        let file = File::create(&funnel_path).map_err(PipelineError::io(&funnel_path))?;
        write_funnel(file, &collect_funnel(registry, ctx)).map_err(PipelineError::io(&funnel_path))?;
        out.push(result?);
    }
    Ok(out)
}

/// Every registered stage in order, optionally stopping after `until`.
pub fn run_all(registry: &StageRegistry, ctx: &Context, until: Option<&str>) -> Result<Vec<StageOutcome>, PipelineError> {
    let names: Vec<&str> = registry.names().collect();
    let end = match until {
        Some(u) => names.iter().position(|n| *n == u).ok_or_else(|| PipelineError::UnknownStage(u.to_string()))? + 1,
        None => names.len(),
    };
    run_stages(registry, &names[..end], ctx)
}

/// Exclusive claim on a working directory, released on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
