use std::path::Path;
use std::process::{Command, Output};

fn isl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isl")).args(args).env_remove("ISL_WEIGHTS").env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = isl(args);
    assert!(out.status.success(), "isl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(root: &Path) {
    ok(&["synth", "--users", "3", "--samples", "4", "--height", "100", "--width", "160", "--out", s(root), "--out-dir", s(root)]);
}

#[test]
fn synth_writes_a_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(data.join("labels")).unwrap().count(), 12);
    let manifest = std::fs::read_to_string(data.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"synth\""), "{manifest}");
    assert!(manifest.contains("weights = \"random:42\""), "{manifest}");
}

#[test]
fn extract_reports_feature_shapes_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    synth(&data);
    let common = ["--data", s(&data), "--out-dir", s(&out), "--input-size", "64"];
    let first = ok(&[&common[..], &["extract", "--feature", "all"]].concat());
    assert!(first.contains("style-default: 12 vectors of length 1920"), "{first}");
    assert!(first.contains("cnn-64: 12 vectors of length 2048"), "{first}");
    let cache = std::fs::read_dir(out.join("cache")).unwrap().next().unwrap().unwrap().path();
    assert!(cache.file_name().unwrap().to_str().unwrap().starts_with("s64-"));
    assert_eq!(ok(&[&common[..], &["extract"]].concat()), first);
}

#[test]
fn usage_and_config_errors() {
    let unknown = isl(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[transfer]\nbeta = 1.0\nbetta = 2.0\n").unwrap();
    let bad = isl(&["--config", s(&cfg), "--out-dir", s(dir.path()), "report"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("betta"));

    let data = dir.path().join("data");
    synth(&data);
    let provider = isl(&["--data", s(&data), "--out-dir", s(dir.path()), "seg-impact", "--provider", "unet"]);
    assert_eq!(provider.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&provider.stderr).contains("threshold"));

    let missing = isl(&["--data", s(&data), "--out-dir", s(dir.path()), "eval"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("isl train"));
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let out = root.join("run");
    synth(&data);
    let common = ["--data", s(&data), "--out-dir", s(&out), "--input-size", "64", "--transfer-size", "48"];
    ok(&[&common[..], &["train", "--feature", "style", "--epochs", "5", "--lr", "1e-3", "--batch", "8"]].concat());
    ok(&[&common[..], &["eval", "--feature", "style"]].concat());
    ok(&[&common[..], &["sweep", "--variation", "perspective", "--degrees", "0,0.5", "--feature", "style"]].concat());
    ok(&[&common[..], &["seg-impact", "--epochs", "2"]].concat());
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn identical_runs_write_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (pipeline(a.path()), pipeline(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["eval.csv", "history_style.csv", "iou.csv", "sweep_perspective.csv"]);
    assert_eq!(fa, fb);
    let sweep = String::from_utf8(fa[3].1.clone()).unwrap();
    assert_eq!(sweep.lines().next(), Some("degree,feature_kind,accuracy,f1,mcc"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn report_redraws_plots_from_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sweep_rotation.csv"), "degree,feature_kind,accuracy,f1,mcc\n0,style,1.0,1.0,1.0\n90,style,0.5,0.4,0.3\n").unwrap();
    let out = dir.path().join("plots");
    ok(&["--out-dir", s(&out), "report", "--results", s(dir.path())]);
    let svg = std::fs::read_to_string(out.join("sweep_rotation.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("style"));
}
