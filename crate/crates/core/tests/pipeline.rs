use std::fs;
use std::path::Path;

use cropref::features::HarmonicConfig;
use cropref::forest::ForestParams;
use cropref::labeling::CropClass;
use cropref::landcover::ClassGrid;
use cropref::pipeline::{
    artifacts, f1_vs_trainsize, read_funnel, run_all, run_stages, spearman, Context, PipelineConfig, PipelineError,
    StageRegistry,
};
use cropref::synth::{labeled_features, write_country, SignatureModel, SynthOptions};

fn small_country(dir: &Path) -> PipelineConfig {
    let opts = SynthOptions {
        size: 50,
        seed: 7,
        ..Default::default()
    };
    write_country(dir, &opts).unwrap();
    PipelineConfig::load(&dir.join("config.toml")).unwrap()
}

#[test]
fn full_run_is_consistent_idempotent_and_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let cfg = small_country(data.path());
    let registry = StageRegistry::with_builtins();

    let a = Context::new(cfg.clone(), data.path().join("a"));
    let first = run_all(&registry, &a, None).unwrap();
    assert_eq!(first.len(), 10);
    assert!(first.iter().all(|o| !o.skipped));

    let funnel = read_funnel(fs::File::open(a.artifact(artifacts::FUNNEL)).unwrap()).unwrap();
    assert!(funnel.is_consistent(), "{funnel:?}");
    assert!(funnel.is_monotone(), "{funnel:?}");

    let before = fs::metadata(a.artifact(artifacts::MODEL)).unwrap().modified().unwrap();
    let second = run_all(&registry, &a, None).unwrap();
    assert!(second.iter().all(|o| o.skipped));
    assert_eq!(fs::metadata(a.artifact(artifacts::MODEL)).unwrap().modified().unwrap(), before);

    let b = Context::new(cfg, data.path().join("b"));
    run_all(&registry, &b, None).unwrap();
    for name in [
        artifacts::REFERENCES,
        artifacts::MODEL,
        artifacts::REPORT,
        artifacts::MAP,
        artifacts::CURVE,
        artifacts::FUNNEL,
    ] {
        assert_eq!(fs::read(a.artifact(name)).unwrap(), fs::read(b.artifact(name)).unwrap(), "{name}");
    }

    let lc = ClassGrid::read_ascii(std::io::BufReader::new(fs::File::open(data.path().join("landcover.asc")).unwrap()))
        .unwrap();
    let map = ClassGrid::read_ascii(std::io::BufReader::new(fs::File::open(a.artifact(artifacts::MAP)).unwrap()))
        .unwrap();
    assert!(map.same_shape(&lc));
}

#[test]
fn changed_config_reruns_downstream_only() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = small_country(data.path());
    let registry = StageRegistry::with_builtins();
    let work = data.path().join("w");
    run_all(&registry, &Context::new(cfg.clone(), &work), Some("filter")).unwrap();
    let again = run_all(&registry, &Context::new(cfg.clone(), &work), Some("plan")).unwrap();
    assert_eq!(again.iter().map(|o| o.skipped).collect::<Vec<_>>(), vec![true, true, false]);
    cfg.landcover.radius_m = 40.0;
    let changed = run_all(&registry, &Context::new(cfg, &work), Some("plan")).unwrap();
    assert!(changed.iter().all(|o| !o.skipped));
}

#[test]
fn stage_errors_map_to_exit_codes() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = small_country(data.path());
    let registry = StageRegistry::with_builtins();

    let err = run_stages(&registry, &["label"], &Context::new(cfg.clone(), data.path().join("x"))).unwrap_err();
    assert!(matches!(&err, PipelineError::Dependency { producer, .. } if producer == "plan"));
    assert_eq!(err.exit_code(), 3);

    let err = run_stages(&registry, &["nope"], &Context::new(cfg.clone(), data.path().join("x"))).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    cfg.streetview.budget_usd = 0.05;
    let ctx = Context::new(cfg, data.path().join("y"));
    let err = run_all(&registry, &ctx, None).unwrap_err();
    assert!(matches!(err, PipelineError::Budget { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(ctx.artifact(artifacts::MANIFEST).is_file());
}

#[test]
fn noisy_label_curve_rises() {
    let model = SignatureModel::hard();
    let cfg = HarmonicConfig::default();
    let priors = [0.3, 0.2, 0.15, 0.15, 0.2];
    let (train_x, _, train_y) = labeled_features(8000, priors, 0.1, &model, &cfg, 11);
    let (test_x, test_y, _) = labeled_features(1000, priors, 0.0, &model, &cfg, 12);
    let params = ForestParams {
        n_trees: 60,
        seed: 5,
        ..Default::default()
    };
    let sizes = [250, 500, 1000, 2000, 4000, 8000];
    let curve = f1_vs_trainsize(&train_x, &train_y, &test_x, &test_y, &sizes, 2, &params).unwrap();
    let f1: Vec<f64> = curve.iter().map(|p| p.macro_f1).collect();
    let n: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let rho = spearman(&n, &f1).unwrap();
    assert!(rho >= 0.9, "spearman {rho:.3} over {f1:?}");
    assert!(test_y.iter().any(|c| *c == CropClass::Other));
}
