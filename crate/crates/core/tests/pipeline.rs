mod support;

use delo::detector::DetectorParams;
use delo::pipeline::{run_pipeline, AblationTag, ExperimentConfig, RunReport};
use delo::resample::{build_resampled_set, ResampledSet};
use delo::synth::DatasetBundle;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "data": {"counts": {"train": 80, "test_seen": 6, "test_unseen": 6, "test_mix": 6}},
            "detector": {"epochs": 30},
            "heads": {"clf_epochs": 2, "attr_epochs": 2},
            "generator": {"epochs": 3},
            "synthesis": {"n_seen": 5, "n_unseen": 10},
            "retrain": {"epochs": 2},
            "aux": {"epochs": 2}
        }"#,
    )
    .unwrap();
    cfg.seed = seed;
    cfg
}

#[test]
fn run_all_is_bitwise_reproducible_and_digest_checked() {
    let cfg = small_config(11);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (report, manifest) = run_pipeline(&cfg, a.path()).unwrap();
    let (_, manifest_b) = run_pipeline(&cfg, b.path()).unwrap();
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(manifest.hashes, manifest_b.hashes);
    assert!(report.delo.is_some());

    let parsed: RunReport = serde_json::from_slice(&ra).unwrap();
    assert_eq!(parsed.config_digest, cfg.digest());

    let digest = cfg.digest();
    let det = DetectorParams::load(&a.path().join("detector"), Some(&digest)).unwrap();
    assert!(DetectorParams::load(&a.path().join("detector"), Some("0000")).is_err());
    assert!(ResampledSet::load(&a.path().join("dres.json"), Some("0000")).is_err());
    let bundle = DatasetBundle::load(&a.path().join("data"), Some(&digest)).unwrap();

    // The stored pool is what the loaded detector resamples, and it passes the gates.
    let pool = ResampledSet::load(&a.path().join("dres.json"), Some(&digest)).unwrap();
    let again = build_resampled_set(&bundle.train, &det, cfg.resample.ratio).unwrap();
    assert_eq!(pool.points, again.points);
    let audit = support::audit_gates(&bundle.train, &det, &pool.points);
    assert!(audit.violations.is_empty(), "{:?}", audit.violations);
    assert!(audit.background <= audit.foreground);
}

#[test]
fn different_seeds_give_different_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2);
    cfg.ablation = AblationTag::Vanilla;
    run_pipeline(&cfg, a.path()).unwrap();
    cfg.seed = 3;
    run_pipeline(&cfg, b.path()).unwrap();
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_ne!(ra, rb);
    let r: RunReport = serde_json::from_slice(&ra).unwrap();
    assert!(r.delo.is_none());
}

#[test]
fn config_rejects_unknown_and_invalid_fields() {
    assert!(ExperimentConfig::from_json(r#"{"retrain": {"epochs": 3, "momentum": 0.9}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"ablation": "bs9"}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"resample": {"ratio": -1.0}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"data": {"grid": 0}}"#).is_err());
}
