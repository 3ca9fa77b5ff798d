use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(args)
        .env_remove("NOWCAST_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nowcast(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn synth_small(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    ok(&[
        "synth",
        "--seed",
        seed,
        "--rows",
        "32",
        "--cols",
        "32",
        "--steps",
        "30",
        "--cells",
        "6",
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--seed",
            "7",
            "--rows",
            "24",
            "--cols",
            "20",
            "--steps",
            "6",
            "--out",
            s(out),
        ]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 4 * 6 + 2);
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "run_manifest.json" {
            assert_eq!(da, db, "{na} differs");
        }
    }
    let c = dir.path().join("c");
    ok(&[
        "synth",
        "--seed",
        "8",
        "--rows",
        "24",
        "--cols",
        "20",
        "--steps",
        "6",
        "--out",
        s(&c),
    ]);
    assert_ne!(fs::read(a.join("P_t0.gfld")).unwrap(), fs::read(c.join("P_t0.gfld")).unwrap());
}

#[test]
fn config_values_yield_to_flags_and_manifests_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    fs::write(&cfg, r#"{"scene": {"rows": 12, "cols": 12, "steps": 3, "n_cells": 2}}"#).unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--seed", "1", "--config", s(&cfg), "--cols", "16", "--out", s(&a)]);
    let scene: Value = serde_json::from_str(&fs::read_to_string(a.join("scene.json")).unwrap()).unwrap();
    assert_eq!(
        (scene["rows"].as_u64(), scene["cols"].as_u64(), scene["seed"].as_u64()),
        (Some(12), Some(16), Some(1))
    );

    let b = dir.path().join("b");
    let manifest = a.join("run_manifest.json");
    ok(&["synth", "--seed", "1", "--config", s(&manifest), "--out", s(&b)]);
    for ((na, da), (_, db)) in files(&a).iter().zip(&files(&b)) {
        if na != "run_manifest.json" {
            assert_eq!(da, db, "{na} differs on replay");
        }
    }
}

#[test]
fn output_root_applies_to_relative_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(["synth", "--seed", "2", "--rows", "8", "--cols", "8", "--steps", "2", "--out", "rel"])
        .env("NOWCAST_OUTPUT_ROOT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("rel").join("P_t30.gfld").exists());
}

#[test]
fn bad_invocations_fail_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = nowcast(&["synth", "--seed", "1", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = nowcast(&[
        "build",
        "--fields",
        s(&dir.path().join("missing")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let first = err.lines().next().unwrap();
    assert!(first.starts_with("error: --fields") && first.contains("no such file"), "{err}");

    let scene = synth_small(dir.path(), "3");
    let out = nowcast(&[
        "build",
        "--config",
        s(&scene.join("run_manifest.json")),
        "--fields",
        s(&scene),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config conflict"));

    let out = nowcast(&["synth", "--seed", "1", "--rows", "0", "--out", s(&dir.path().join("z"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn perfect_forecasts_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_small(dir.path(), "4");
    let leads = 3;
    let mut entries = Vec::new();
    for anchor in [150i64, 300, 600] {
        for k in 1..=leads {
            let t = anchor + 30 * k;
            entries.push(serde_json::json!({
                "anchor": anchor, "lead": k, "valid_time": t,
                "path": scene.join(format!("P_t{t}.gfld")),
            }));
        }
    }
    let index = dir.path().join("index.json");
    fs::write(&index, serde_json::json!({"forecast_steps": leads, "entries": entries}).to_string()).unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--forecasts",
        s(&index),
        "--truth",
        s(&scene),
        "--out",
        s(&out),
        "--thresholds",
        "0.1,1,2",
        "--scales",
        "1,5",
    ]);
    let reports: Value = serde_json::from_str(&fs::read_to_string(out.join("scores.json")).unwrap()).unwrap();
    let model = &reports["model"];
    assert_eq!(model["schema_version"], 1);
    for lead in model["leads"].as_array().unwrap() {
        for t in lead["thresholds"].as_array().unwrap() {
            assert_eq!(t["csi"], 1.0, "{t}");
            assert_eq!(t["hss"], 1.0);
        }
        for f in lead["fss"].as_array().unwrap() {
            assert_eq!(f["fss"], 1.0);
        }
    }
    assert!(reports["persistence"]["leads"][0]["thresholds"][1]["csi"].as_f64().unwrap() < 1.0);
    let csv = fs::read_to_string(out.join("scores_model.csv")).unwrap();
    assert!(csv.starts_with("schema_version,lead,metric,threshold,scale,value\n"));
}

#[test]
fn autocorrelation_and_feature_ranking_runs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_small(dir.path(), "5");
    let ac = dir.path().join("ac");
    let out = ok(&["autocorr", "--fields", s(&scene), "--out", s(&ac), "--max-lag", "8"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("alpha="));
    let csv = fs::read_to_string(ac.join("autocorr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);

    let ds = dir.path().join("ds");
    ok(&[
        "build",
        "--fields",
        s(&scene),
        "--out",
        s(&ds),
        "--input-steps",
        "4",
        "--forecast-steps",
        "2",
        "--patch",
        "16",
        "--patches",
        "10",
    ]);
    let mr = dir.path().join("mr");
    ok(&[
        "mrmr",
        "--dataset",
        s(&ds.join("dataset.json")),
        "--out",
        s(&mr),
        "--pixels",
        "200",
        "--form",
        "difference",
    ]);
    let res: Value = serde_json::from_str(&fs::read_to_string(mr.join("mrmr.json")).unwrap()).unwrap();
    assert_eq!(res["form"], "difference");
    assert_eq!(res["names"].as_array().unwrap().len(), 3 + 6 + 1);
}

fn pipeline(dir: &Path, loss: &str) -> (PathBuf, PathBuf, PathBuf) {
    let scene = synth_small(dir, "11");
    let ds = dir.join("ds");
    ok(&[
        "build",
        "--fields",
        s(&scene),
        "--out",
        s(&ds),
        "--input-steps",
        "4",
        "--forecast-steps",
        "2",
        "--patch",
        "16",
        "--patches",
        "12",
        "--seed",
        "3",
    ]);
    let model = dir.join("model");
    let dataset = ds.join("dataset.json");
    ok(&[
        "train",
        "--dataset",
        s(&dataset),
        "--out",
        s(&model),
        "--seed",
        "5",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--blocks",
        "1",
        "--base-channels",
        "2",
        "--loss",
        loss,
    ]);
    let fc = dir.join("fc");
    ok(&[
        "predict",
        "--checkpoint",
        s(&model.join("checkpoint.gnss")),
        "--dataset",
        s(&dataset),
        "--out",
        s(&fc),
    ]);
    let ev = dir.join("ev");
    ok(&[
        "evaluate",
        "--forecasts",
        s(&fc.join("forecasts.json")),
        "--truth",
        s(&scene),
        "--out",
        s(&ev),
    ]);
    (model, fc, ev)
}

#[test]
fn end_to_end_regression_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (model, fc, ev) = pipeline(dir.path(), "mse");
    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let index: Value = serde_json::from_str(&fs::read_to_string(fc.join("forecasts.json")).unwrap()).unwrap();
    let entries = index["entries"].as_array().unwrap();
    assert!(!entries.is_empty() && entries.len() % 2 == 0);
    assert!(entries.iter().all(|e| e["exceedance"].as_array().unwrap().is_empty()));
    let reports: Value = serde_json::from_str(&fs::read_to_string(ev.join("scores.json")).unwrap()).unwrap();
    for name in ["model", "persistence"] {
        let leads = reports[name]["leads"].as_array().unwrap();
        assert_eq!(leads.len(), 2);
        assert_eq!(leads[0]["fields"].as_u64().unwrap() as usize, entries.len() / 2);
        for l in leads {
            for t in l["thresholds"].as_array().unwrap() {
                if let Some(v) = t["csi"].as_f64() {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    // Replaying the training manifest reproduces the checkpoint bit for bit.
    let replay = dir.path().join("replay");
    ok(&[
        "train",
        "--config",
        s(&model.join("run_manifest.json")),
        "--seed",
        "5",
        "--out",
        s(&replay),
    ]);
    assert_eq!(
        fs::read(model.join("checkpoint.gnss")).unwrap(),
        fs::read(replay.join("checkpoint.gnss")).unwrap()
    );
}

#[test]
fn classification_checkpoints_emit_exceedance_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fc, _) = pipeline(dir.path(), "focal");
    let index: Value = serde_json::from_str(&fs::read_to_string(fc.join("forecasts.json")).unwrap()).unwrap();
    let first = &index["entries"][0];
    let maps = first["exceedance"].as_array().unwrap();
    assert_eq!(maps.len(), 3);
    let path = fc.join(maps[0]["path"].as_str().unwrap());
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"GFLD");
}
