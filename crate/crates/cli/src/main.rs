use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cropref::pipeline::{
    collect_funnel, run_all, run_stages, Context, PipelineConfig, PipelineError, StageOutcome, StageRegistry,
};
use cropref::synth::{write_country, SynthOptions};

#[derive(Parser)]
#[command(name = "cropref", version, about = "Street-view crop ground references and crop-type mapping")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding stage outputs.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// With `all`: stop after this stage.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Densify the road network into candidate points with field views.
    Densify,
    /// Keep field points whose surroundings are cropland without trees.
    Filter,
    /// Plan street-view requests and estimate their cost.
    Plan,
    /// Fetch planned images into the content-addressed cache.
    Fetch,
    /// Vote window predictions into ground references.
    Label,
    /// Fit harmonic features to the references' time series.
    Features,
    /// Split references and train the random forest.
    Train,
    /// Score the model on the held-out test split.
    Evaluate,
    /// Classify every cropland cell into a crop-type map.
    Map,
    /// F1 against training-set size.
    Curve,
    /// Run every stage in order, reusing up-to-date outputs.
    All,
    /// Generate a synthetic country and its configuration.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Grid cells per side.
        #[arg(long, default_value_t = 100)]
        size: usize,
    },
}

impl Command {
    fn stage_name(&self) -> Option<&'static str> {
        Some(match self {
            Command::Densify => "densify",
            Command::Filter => "filter",
            Command::Plan => "plan",
            Command::Fetch => "fetch",
            Command::Label => "label",
            Command::Features => "features",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Map => "map",
            Command::Curve => "curve",
            Command::All | Command::Synth { .. } => return None,
        })
    }
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        let note = if o.skipped { " (up to date)" } else { "" };
        println!("{}{note}", o.stage);
        for e in &o.funnel {
            println!("  {:<16} {:>10} -> {}", e.step, e.input, e.output);
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Synth { out, size } = &cli.command {
        let opts = SynthOptions {
            seed: cli.seed.unwrap_or(SynthOptions::default().seed),
            size: *size,
            ..Default::default()
        };
        let s = write_country(out, &opts)?;
        println!(
            "wrote {}: {} roads, {} cropland cells, {} requests, {} images with windows, ~{} references",
            out.display(),
            s.roads,
            s.cropland_cells,
            s.requests,
            s.images_with_windows,
            s.expected_references
        );
        return Ok(());
    }
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let ctx = Context::new(config, cli.workdir);
    let registry = StageRegistry::with_builtins();
    let outcomes = match cli.command.stage_name() {
        Some(name) => run_stages(&registry, &[name], &ctx)?,
        None => run_all(&registry, &ctx, cli.stage.as_deref())?,
    };
    if !collect_funnel(&registry, &ctx).is_consistent() {
        log::warn!("funnel counts do not chain between stages");
    }
    report(&outcomes);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
