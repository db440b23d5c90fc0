use std::path::Path;
use std::process::{Command, Output};

use hiformer::io::{encode_checkpoint, read_raster};
use hiformer::{build_config, count_parameters, HiFormerF32};
use serde_json::Value;

fn hiformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiformer"))
        .args(args)
        .env("HIFORMER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = hiformer(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_matches_library_count() {
    let v = ok_json(&["params", "--model", "hiformer-b", "--json"]);
    let want = count_parameters(&build_config("hiformer-b").unwrap()).unwrap();
    assert_eq!(v["report"]["total"].as_u64().unwrap() as usize, want.total);
    let millions = want.total as f64 / 1e6;
    assert!((millions - 25.51).abs() / 25.51 < 0.15);

    let text = String::from_utf8(hiformer(&["params", "--model", "hiformer-b"]).stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("total") && l.contains("25.")), "{text}");
}

#[test]
fn ablation_switches_change_counts() {
    let full = ok_json(&["params", "--model", "hiformer-s", "--json"]);
    let bare = ok_json(&["params", "--model", "hiformer-s", "--no-dlf", "--json"]);
    let dlf = full["report"]["per_module"].as_array().unwrap().iter().find(|m| m[0] == "dlf").unwrap()[1].as_u64().unwrap();
    assert_eq!(full["report"]["total"].as_u64().unwrap() - bare["report"]["total"].as_u64().unwrap(), dlf);

    let r18 = ok_json(&["params", "--model", "hiformer-s", "--backbone", "resnet18", "--json"]);
    assert!(r18["report"]["total"].as_u64() < full["report"]["total"].as_u64());
}

#[test]
fn zero_epoch_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    ok_json(&[
        "train", "--model", "tiny", "--data", "synth", "--synth-n", "6", "--epochs", "0", "--seed", "4", "--out", path(&ckpt), "--json",
    ]);
    let init = HiFormerF32::new(&build_config("tiny").unwrap(), 4).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), encode_checkpoint(&init.store));
}

#[test]
fn oracle_eval_is_perfect() {
    let v = ok_json(&["eval", "--oracle", "--data", "synth", "--synth-n", "8", "--classes", "3", "--json"]);
    assert_eq!(v["mean"]["dsc"], 1.0);
    assert_eq!(v["mean"]["hd95"], 0.0);
    assert_eq!(v["per_class"].as_array().unwrap().len(), 2);
}

#[test]
fn synth_train_eval_infer_pipeline_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let v = ok_json(&["synth", "--n", "10", "--hw", "32", "--k", "2", "--out", path(&data), "--seed", "1", "--json"]);
    assert_eq!(v["samples"], 10);

    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let v = ok_json(&["train", "--model", "tiny", "--data", path(&data), "--epochs", "2", "--out", path(&ckpt), "--seed", "2", "--json"]);
        (v, std::fs::read(&ckpt).unwrap(), ckpt)
    };
    let (a, bytes_a, ckpt) = run("a.ckpt");
    let (b, bytes_b, _) = run("b.ckpt");
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a["report"], b["report"]);
    assert_eq!(a["epochs"], 2);
    let log = std::fs::read_to_string(ckpt.with_extension("jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let e = ok_json(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--json"]);
    assert_eq!(e["samples"], 10);
    assert!(e["mean"]["dsc"].as_f64().unwrap() <= 1.0);

    let mask = dir.path().join("mask.pgm");
    let image = data.join("images").join("0000.ppm");
    let i = ok_json(&["infer", "--ckpt", path(&ckpt), "--image", path(&image), "--out", path(&mask), "--json"]);
    let r = read_raster(&mask).unwrap();
    assert_eq!((r.width, r.height), (32, 32));
    assert!(r.pixels.iter().all(|&l| l < 2));
    let counts: u64 = i["class_pixels"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 1024);

    // Backbone-only warm start from the trained checkpoint.
    let warm = dir.path().join("warm.ckpt");
    ok_json(&[
        "train", "--model", "tiny", "--data", path(&data), "--epochs", "0", "--init", path(&ckpt), "--partial", "cnn.", "--out", path(&warm),
        "--json",
    ]);
}

#[test]
fn gradcheck_passes_on_tiny() {
    let v = ok_json(&["gradcheck", "--model", "tiny", "--entries", "4", "--json"]);
    assert_eq!(v["passed"], true);
    let groups: Vec<&str> = v["runs"][0]["groups"].as_array().unwrap().iter().map(|g| g["group"].as_str().unwrap()).collect();
    assert_eq!(groups, ["cnn", "swin", "dlf", "decoder"]);
}

#[test]
fn audit_passes() {
    let v = ok_json(&["audit", "--json"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert!(v["rows"].as_array().unwrap().iter().all(|r| r["within_tolerance"] == true));
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["params", "--model", "hiformer-x"],
        vec!["eval", "--ckpt", "/nonexistent.ckpt", "--data", "synth"],
        vec!["train", "--model", "tiny", "--data", path(dir.path()), "--epochs", "1"],
        vec!["params", "--model", "tiny", "--backbone", "vgg"],
    ] {
        let out = hiformer(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(!err.trim().is_empty(), "{args:?}");
        assert_eq!(err.trim().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error:"), "{err}");
    }
}
