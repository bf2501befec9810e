use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biovista_core::embed::{read_store, write_store, EmbeddingStore};
use biovista_core::synth::SynthSpec;
use biovista_core::types::Manifest;

fn biovista(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biovista"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Miniature dataset with a sparse point cloud to keep extraction quick.
fn synth(dir: &Path) -> PathBuf {
    let mut spec = SynthSpec::mini(4);
    spec.als_density = 1.0;
    fs::write(dir.join("spec.toml"), toml::to_string(&spec).unwrap()).unwrap();
    ok(&biovista(&["synth", "--spec", "spec.toml", "--out", "data"], dir));
    dir.join("data")
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    for f in ["hnv.tif", "embeddings.bvem", "manifest.csv", "pipeline.toml", "patches.geojson"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let cfg = data.join("pipeline.toml");
    let cfg = cfg.to_str().unwrap();

    ok(&biovista(&["--config", cfg, "build-dataset", "--out", "ds"], tmp.path()));
    let rebuilt = fs::read(tmp.path().join("ds/manifest.csv")).unwrap();
    assert_eq!(rebuilt, fs::read(data.join("manifest.csv")).unwrap());
    let manifest = Manifest::load(&data.join("manifest.csv")).unwrap();
    assert!(!manifest.is_empty());

    ok(&biovista(&["--config", cfg, "--jobs", "2", "extract", "--subsample", "256", "--augment-previews", "2"], tmp.path()));
    let out = data.join("out");
    let failures = fs::read_to_string(out.join("extract_failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 1, "{failures}");
    for s in &manifest.samples {
        assert!(out.join(format!("patches/{}.png", s.id)).exists());
        assert!(out.join(format!("patches/{}.pgw", s.id)).exists());
        let xyz = fs::read_to_string(out.join(format!("clouds/{}.xyz", s.id))).unwrap();
        assert_eq!(xyz.lines().count(), 256);
    }
    assert_eq!(fs::read_dir(out.join("previews")).unwrap().count(), 6);

    ok(&biovista(&["--config", cfg, "train-fusion", "--epochs", "3"], tmp.path()));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_oacc,val_macc,val_acc_high,val_acc_low");
    assert_eq!(log.lines().count(), 4);
    assert!(out.join("fusion.bvml").exists());

    ok(&biovista(&["--config", cfg, "ensemble"], tmp.path()));
    let weights: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ensemble_weights.json")).unwrap()).unwrap();
    let w = weights["w_2d"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&w));

    for format in ["md", "csv"] {
        ok(&biovista(
            &[
                "--config",
                cfg,
                "evaluate",
                "--predictions",
                "data/out/predictions_fusion.csv",
                "data/out/predictions_ensemble.csv",
                "--format",
                format,
                "--group-by",
                "year",
                "--out",
                &format!("report_{format}"),
            ],
            tmp.path(),
        ));
    }
    let md = fs::read_to_string(tmp.path().join("report_md/report.md")).unwrap();
    assert!(md.contains("| fusion |") && md.contains("| ensemble |"));
    let csv = fs::read_to_string(tmp.path().join("report_csv/summary.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,oacc,macc,acc_high,acc_low");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn missing_hnv_is_exit_2_and_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = biovista(&["build-dataset", "--hnv", "nope/hnv.tif", "--out", "ds"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("error[MissingInput]") && err.contains("nope/hnv.tif"), "{err}");
}

#[test]
fn invalid_values_are_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("hnv.tif"), b"").unwrap();
    let out = biovista(&["build-dataset", "--hnv", "hnv.tif", "--min-area-ha", "-1"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[InvalidConfig]"));

    fs::write(tmp.path().join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = biovista(&["--config", "bad.toml", "train-fusion"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    fs::write(tmp.path().join("typo.toml"), "[paths]\nhvn = \"x\"\n").unwrap();
    let out = biovista(&["--config", "typo.toml", "build-dataset"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_are_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let cfg = data.join("pipeline.toml");
    let cfg = cfg.to_str().unwrap();

    fs::write(tmp.path().join("empty.csv"), "model,sample_id,predicted,confidence\n").unwrap();
    let out = biovista(&["--config", cfg, "evaluate", "--predictions", "empty.csv", "--out", "r"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("error[EmptyEval]"));

    let store = read_store(&data.join("embeddings.bvem")).unwrap();
    let stripped = EmbeddingStore::from_records(store.records().cloned().map(|mut r| {
        r.probs = None;
        r
    }))
    .unwrap();
    write_store(stripped.records(), &tmp.path().join("noprobs.bvem")).unwrap();
    let out = biovista(&["--config", cfg, "ensemble", "--embeddings", "noprobs.bvem", "--out", "e"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("error[NoProbs]"));

    fs::write(tmp.path().join("garbage.tif"), b"II*\0garbage").unwrap();
    let out = biovista(&["build-dataset", "--hnv", "garbage.tif"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn extraction_lists_out_of_range_samples_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let mut manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    manifest.push_str("far_000,100000.0,5000000.0,2021,high,far,test\n");
    fs::write(tmp.path().join("manifest.csv"), manifest).unwrap();
    let cfg = data.join("pipeline.toml");
    let out = biovista(
        &["--config", cfg.to_str().unwrap(), "extract", "--manifest", "manifest.csv", "--subsample", "64", "--out", "x"],
        tmp.path(),
    );
    ok(&out);
    let failures = fs::read_to_string(tmp.path().join("x/extract_failures.csv")).unwrap();
    let rows: Vec<&str> = failures.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{failures}");
    assert!(rows[0].starts_with("far_000,2d,OutOfBounds"));
    assert!(rows[1].starts_with("far_000,3d,MissingTile"));
    assert!(tmp.path().join("x/clouds").read_dir().unwrap().count() > 0);
}
