use std::path::Path;
use std::process::{Command, Output};

use tcr_core::pipeline::{ModelRef, PipelineConfig, PipelineOutput};
use tcr_core::postprocess::Thresholds;

fn tcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcr")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tcr(args);
    assert!(out.status.success(), "tcr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_tune_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let listing = ok(&["synth", "--out", s(&corpus), "--count", "10", "--width", "384", "--height", "384", "--tile-size", "256"]);
    assert_eq!(listing.lines().count(), 10);
    assert!(corpus.join("slide_009").join("manifest.json").exists());

    let weights = dir.path().join("det.tcrw");
    let curve = dir.path().join("curve.csv");
    ok(&[
        "train", "--corpus", s(&corpus), "--kind", "detcls", "--epochs", "1", "--examples", "4", "--patch", "96",
        "--val-patches", "2", "--out", s(&weights), "--curve", s(&curve),
    ]);
    let csv = std::fs::read_to_string(&curve).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss"));
    assert_eq!(csv.lines().count(), 2);

    let config = dir.path().join("pipeline.json");
    let cfg = PipelineConfig {
        detcls: ModelRef { weights: "det.tcrw".into(), factor: 0.5 },
        seg: None,
        thresholds: Thresholds::default(),
        halo: 94,
        interior: 256,
        heatmap_um: 50.0,
    };
    std::fs::write(&config, serde_json::to_vec(&cfg).unwrap()).unwrap();

    let tuned = dir.path().join("tuned.json");
    ok(&["tune", "--corpus", s(&corpus), "--config", s(&config), "--step", "0.5", "--out", s(&tuned)]);
    let t = PipelineConfig::load(&tuned).unwrap().thresholds;
    assert_eq!((t.t_d, t.t_c), (0.5, 0.5));

    let report = dir.path().join("report.json");
    let line = ok(&["eval", "--corpus", s(&corpus), "--config", s(&tuned), "--out", s(&report)]);
    assert!(line.contains("TCR MAE"));
    assert!(report.exists());

    let result = dir.path().join("result.json");
    let slide = corpus.join("slide_000");
    ok(&["analyze", "--slide", s(&slide), "--config", s(&tuned), "--region", "0,0,300,200", "--workers", "2", "--out", s(&result)]);
    let out: PipelineOutput = serde_json::from_slice(&std::fs::read(&result).unwrap()).unwrap();
    assert_eq!((out.region.w, out.region.h), (300, 200));
    assert!(!out.partial);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = tcr(&["analyze", "--slide", s(dir.path()), "--config", "x.json", "--region", "1,2,3", "--out", "o.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("X,Y,W,H"));

    let out = tcr(&["analyze", "--slide", s(&dir.path().join("missing")), "--config", "x.json", "--out", "o.json"]);
    assert!(!out.status.success());
}
