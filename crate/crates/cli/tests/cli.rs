use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matte_core::eval::{aggregate, read_records, ReportRow};
use matte_core::inversion::read_bundle;

fn matte(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matte"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_reference(dir: &Path) -> PathBuf {
    let img = image::RgbImage::from_fn(24, 24, |x, y| {
        if y < 12 {
            image::Rgb([220, 30, 30])
        } else if x < 12 {
            image::Rgb([30, 30, 220])
        } else {
            image::Rgb([240, 240, 240])
        }
    });
    let p = dir.join("ref.png");
    img.save(&p).unwrap();
    p
}

fn assert_error_line(o: &Output, code: i32, category: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("matte: error[{category}]: ")), "{err}");
}

#[test]
fn invert_writes_bundle_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_reference(dir.path());
    let o = matte(dir.path(), &["invert", "ref.png", "--class", "cat", "--backend", "toy", "--seed", "0", "--steps", "8", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bundle = read_bundle(std::io::BufReader::new(std::fs::File::open(dir.path().join("run/tokens.bin")).unwrap())).unwrap();
    assert_eq!(bundle.embeddings.len(), 4);
    assert_eq!(bundle.log.records.len(), 8);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "invert");
    assert_eq!(manifest["config"]["inversion"]["steps"], 8);
    assert!(manifest["inputs"]["ref.png"].as_str().unwrap().len() == 64);
}

#[test]
fn invert_and_generate_are_bitwise_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let reference = write_reference(dir.path());
    let before = std::fs::read(&reference).unwrap();
    for run in ["a", "b"] {
        let o = matte(dir.path(), &["invert", "ref.png", "--class", "cat", "--seed", "3", "--steps", "6", "--out", run]);
        assert!(o.status.success(), "{}", stderr(&o));
        let bundle = format!("{run}/tokens.bin");
        let o = matte(
            dir.path(),
            &["generate", "--bundle", &bundle, "--prompt", "a ⟨c⟩ colored photo of a teapot", "--seed", "1", "--steps", "10", "--out", run],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["tokens.bin", "image.png"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    assert_eq!(std::fs::read(&reference).unwrap(), before, "input untouched");
}

#[test]
fn unknown_command_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_error_line(&matte(dir.path(), &["bogus"]), 2, "usage");
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_reference(dir.path());
    std::fs::write(dir.path().join("bad.json"), r#"{"inversion": {"lr": -1.0}}"#).unwrap();
    assert_error_line(&matte(dir.path(), &["invert", "ref.png", "--class", "cat", "--config", "bad.json"]), 3, "config");
    std::fs::write(dir.path().join("typo.json"), r#"{"inversoin": {}}"#).unwrap();
    assert_error_line(&matte(dir.path(), &["invert", "ref.png", "--class", "cat", "--config", "typo.json"]), 3, "config");
    assert_error_line(
        &matte(dir.path(), &["eval", "pairs", "--bundle", "x", "--reference", "ref.png", "--pair", "style-layout"]),
        3,
        "config",
    );
}

#[test]
fn unavailable_backend_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write_reference(dir.path());
    let o = matte(dir.path(), &["invert", "ref.png", "--class", "cat", "--backend", "latent-diffusion"]);
    assert_error_line(&o, 4, "backend");
}

#[test]
fn palette_prints_phrase() {
    let dir = tempfile::tempdir().unwrap();
    write_reference(dir.path());
    let o = matte(dir.path(), &["palette", "ref.png", "--out", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["phrase"], "red, white and blue colors");
    assert!(dir.path().join("p/manifest.json").exists());
}

#[test]
fn probe_writes_stack_heatmaps_and_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let grid = r#"{"mode": "uniform", "subsets": [[1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16]],
                   "stages": [[0, 1000]], "cells": {"1.1": "a red standing cat in oil painting style"}}"#;
    std::fs::write(dir.path().join("grid.json"), grid).unwrap();
    let o = matte(dir.path(), &["probe", "--spec", "grid.json", "--track", "red,standing", "--steps", "6", "--out", "pr"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("pr");
    assert!(out.join("image.png").exists());
    assert!(out.join("stack/layer16.npy").exists());
    assert!(out.join("heatmaps/red/L08_t1.png").exists());
    let csv = std::fs::read_to_string(out.join("saliency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 16 * 4);

    let o = matte(dir.path(), &["probe", "--spec", "grid.json", "--track", "blue", "--steps", "2"]);
    assert_error_line(&o, 3, "config");
}

#[test]
fn eval_report_derives_from_records() {
    let dir = tempfile::tempdir().unwrap();
    write_reference(dir.path());
    let o = matte(dir.path(), &["invert", "ref.png", "--class", "cube", "--steps", "4", "--out", "inv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = matte(
        dir.path(),
        &["eval", "tokens", "--bundle", "inv/tokens.bin", "--reference", "ref.png", "--n", "2", "--steps", "4", "--out", "ev/report.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_records(std::fs::File::open(dir.path().join("ev/report.records.csv")).unwrap()).unwrap();
    let report: Vec<ReportRow> = csv::Reader::from_path(dir.path().join("ev/report.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let hash = report[0].config_hash.clone();
    assert_eq!(aggregate(&records, &hash), report);
    assert!(dir.path().join("ev/report.json").exists());
    assert!(dir.path().join("ev/report.manifest.json").exists());
}
