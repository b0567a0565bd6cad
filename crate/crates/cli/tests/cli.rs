//! End-to-end runs of the `crowdcount` binary: every subcommand, the
//! documented exit codes, and the on-disk artifact round trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdcount::data::load_annotations;
use crowdcount::io::pnm::read_density_pnm;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crowdcount"))
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn quick_config(dir: &Path, steps: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "backbone": "tiny",
            "scales": [1, 2],
            "attention_levels": "1+2+3",
            "head_widths": [8, 8, 8, 8],
            "fusion": [0.8, 0.15, 0.05],
            "reduction": 16,
            "spatial_kernel": 7
        },
        "optimizer": { "lr": 1e-4, "batch_size": 2, "steps": steps },
        "sigma": 4.0,
        "dataset": { "synth": { "config": {
            "width": 32, "height": 32, "count_range": [3, 8],
            "radius_range": [2.0, 3.0], "background_amplitude": 0.1,
            "margin": 8.0, "min_separation": 3.0
        }, "count": 2 } },
        "seed": 3,
        "out_dir": dir.join("run")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_generates_loadable_datasets_deterministically() {
    let dir = work_dir("synth");
    for sub in ["a", "b"] {
        let status = bin()
            .args(["synth", "--out"])
            .arg(dir.join(sub))
            .args(["-n", "3", "--seed", "9"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = load_annotations(&dir.join("a/index.mla")).unwrap();
    let b = load_annotations(&dir.join("b/index.mla")).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.points.len(), y.points.len());
        assert_eq!(x.image.data(), y.image.data());
    }
}

#[test]
fn synth_zero_scenes_is_a_valid_empty_index() {
    let dir = work_dir("synth_empty");
    let status = bin()
        .args(["synth", "--out"])
        .arg(&dir)
        .args(["-n", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(load_annotations(&dir.join("index.mla")).unwrap().is_empty());
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = work_dir("train_loop");
    let config = quick_config(&dir, 2);
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = dir.join("run/final.mlaw");
    assert!(checkpoint.exists());
    let log = std::fs::read_to_string(dir.join("run/train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("step=")));

    // Eval prints per-image records whose aggregate MAE is recomputable.
    let out = bin()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    let mut errs = Vec::new();
    let mut reported_mae = None;
    for line in text.lines() {
        if line.starts_with("image=") {
            let err: f64 = line
                .split("abs_err=")
                .nth(1)
                .unwrap()
                .trim()
                .parse()
                .unwrap();
            errs.push(err);
        }
        if line.starts_with("aggregate") {
            reported_mae = line
                .split("mae=")
                .nth(1)
                .and_then(|s| s.split_whitespace().next())
                .and_then(|s| s.parse::<f64>().ok());
        }
    }
    let recomputed = errs.iter().sum::<f64>() / errs.len() as f64;
    let reported = reported_mae.expect("aggregate line present");
    assert!(
        (recomputed - reported).abs() < 1e-4,
        "recomputed {recomputed} vs reported {reported}"
    );

    // Predict on one of the generated scenes.
    let synth_dir = work_dir("predict_input");
    assert!(bin()
        .args(["synth", "--out"])
        .arg(&synth_dir)
        .args(["-n", "1", "--seed", "4"])
        .status()
        .unwrap()
        .success());
    let image = synth_dir.join("synth0000.pnm");
    let map_path = dir.join("pred.pnm");
    let out = bin()
        .args(["predict", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--out")
        .arg(&map_path)
        .arg(&image)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let printed: f64 = text
        .lines()
        .find(|l| l.starts_with("count="))
        .and_then(|l| l.strip_prefix("count="))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    // The printed count is the sum of the emitted raw map.
    let (_, stored_count) = read_density_pnm(&map_path).unwrap();
    assert!((printed - stored_count).abs() < 1e-6);
    // 64x64 synth default -> 16x16 map at 1/4 resolution.
    let (map, _) = read_density_pnm(&map_path).unwrap();
    assert_eq!(map.shape(), &[16, 16]);
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = work_dir("bad_config");
    let path = dir.join("broken.json");
    std::fs::write(&path, "{ not valid json").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Structurally valid JSON with an invalid value also exits 1.
    let cfg_path = quick_config(&dir, 1);
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("\"sigma\": 4.0", "\"sigma\": -1.0");
    std::fs::write(&cfg_path, text).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_code_two() {
    let dir = work_dir("numeric_fail");
    let cfg_path = quick_config(&dir, 2);
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("\"lr\": 0.0001", "\"lr\": 1e280");
    std::fs::write(&cfg_path, text).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn import_builds_an_index_from_csv_points() {
    let dir = work_dir("import");
    // Images via synth, then foreign CSV annotations alongside.
    assert!(bin()
        .args(["synth", "--out"])
        .arg(dir.join("images"))
        .args(["-n", "2", "--seed", "6"])
        .status()
        .unwrap()
        .success());
    let points = dir.join("points");
    std::fs::create_dir_all(&points).unwrap();
    std::fs::write(points.join("synth0000.csv"), "# head points\n10.5, 20.25\n40 30\n").unwrap();
    std::fs::write(points.join("synth0001.csv"), "5,5\n").unwrap();
    let index = dir.join("imported.mla");
    let out = bin()
        .args(["import", "--format", "csv", "--images"])
        .arg(dir.join("images"))
        .arg("--points")
        .arg(&points)
        .arg("--out")
        .arg(&index)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = load_annotations(&index).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].points.len(), 2);
    assert_eq!(loaded[1].points.len(), 1);

    // Out-of-bounds foreign points are rejected at import time.
    std::fs::write(points.join("synth0001.csv"), "100,5\n").unwrap();
    let out = bin()
        .args(["import", "--format", "csv", "--images"])
        .arg(dir.join("images"))
        .arg("--points")
        .arg(&points)
        .arg("--out")
        .arg(&index)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_rejects_invalid_config_before_running() {
    let dir = work_dir("gradcheck_cfg");
    let path = dir.join("bad.json");
    std::fs::write(&path, "{}").unwrap();
    let out = bin()
        .args(["gradcheck", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
