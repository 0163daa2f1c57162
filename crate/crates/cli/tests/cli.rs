//! End-to-end runs of the `ast` binary on a miniature configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "precision": "f64",
    "model": {
        "image_size": 16,
        "slots": 2,
        "feature_generator": {"widths": [4, 8, 8]},
        "encoder": {"d_t": 8, "heads": 2, "ff_dim": 8, "layers": 1, "z_what_dim": 4},
        "background": {"latent_dim": 4, "widths": [4, 4]}
    },
    "train": {
        "total_steps": 4, "phase2_steps": 2, "batch_size": 2, "bg_pretrain_steps": 3,
        "bg_batch_size": 2, "log_every": 1, "eval_every": 2, "checkpoint_every": 2,
        "n_pixel": 4, "lr_warmup_steps": 2
    },
    "data": {"image_size": 16, "count": 4}
}"#;

fn ast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ast"))
        .args(args)
        .env_remove("AST_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_reproducible_and_echoes_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ast(&["gen-data", "--config", s(&cfg), "--out", s(out), "--count", "8"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for i in 0..8 {
        for sub in ["images", "labels"] {
            let name = format!("{sub}/{i:06}.png");
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        }
    }
    assert!(!a.join("images/000008.png").exists());
    let info: Value = serde_json::from_str(&fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(info["count"], 8);
    assert_eq!(info["spec"]["image_size"], 16);
    assert_eq!(info["spec"]["max_objects"], 3);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = ast(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = ast(&["gen-data", "--set", "data.colour=1", "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = ast(&["gen-data", "--set", "data.count=1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn ct_without_background_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for scenario in ["ct", "frozen-bg"] {
        let o = ast(&["train", "--config", s(&cfg), "--scenario", scenario, "--quiet"]);
        assert_eq!(o.status.code(), Some(2), "{scenario}: {}", stderr(&o));
        assert!(stderr(&o).contains("--bg-ckpt"));
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ast(&["gen-data", "--config", s(&tiny_config(dir.path())), "--out", s(&data)]).status.success());
    let o = ast(&["eval", "--ckpt", s(&dir.path().join("none.ckpt")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none.ckpt"));
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ast(&["gen-data", "--config", s(&tiny_config(dir.path())), "--out", s(&data), "--count", "5"]);
    assert!(o.status.success());
    let report = dir.path().join("metrics.json");
    let o = ast(&["eval", "--pred", s(&data.join("labels")), "--data", s(&data), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(m["miou"], 1.0);
    assert_eq!(m["ari_fg"], 1.0);
    assert_eq!(m["per_image"].as_array().unwrap().len(), 5);
}

fn pipeline(root: &Path, seed: &str) -> (String, Vec<u8>) {
    let cfg = tiny_config(root);
    let data = root.join("data");
    let o = ast(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bg_dir = root.join("bg");
    let o = ast(&[
        "pretrain-bg", "--config", s(&cfg), "--data", s(&data), "--out", s(&bg_dir), "--seed", seed, "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = root.join("run");
    let o = ast(&[
        "train",
        "--config", s(&cfg),
        "--scenario", "ct",
        "--bg-ckpt", s(&bg_dir.join("background.ckpt")),
        "--data", s(&data),
        "--out", s(&run),
        "--seed", seed,
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(run.join("eval.jsonl")).unwrap().lines().count(), 2);
    assert!(run.join("step_000002.ckpt").exists());
    let resolved: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["scenario"], "ct");
    (
        fs::read_to_string(run.join("log.jsonl")).unwrap(),
        fs::read(run.join("final.ckpt")).unwrap(),
    )
}

#[test]
fn ct_pipeline_is_deterministic_and_segments() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, ckpt_a) = pipeline(a.path(), "4");
    let (log_b, ckpt_b) = pipeline(b.path(), "4");
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);

    let ckpt = a.path().join("run/final.ckpt");
    let data = a.path().join("data");
    let report = a.path().join("eval/metrics.json");
    let o = ast(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(m["mse"].as_f64().unwrap() >= 0.0);

    let labels = a.path().join("seg.png");
    let side = a.path().join("side.png");
    let o = ast(&[
        "segment", "--ckpt", s(&ckpt), "--image", s(&data.join("images/000000.png")),
        "--out", s(&labels), "--recon", s(&side),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seg = image::open(&labels).unwrap().to_luma8();
    assert_eq!(seg.dimensions(), (16, 16));
    assert!(seg.pixels().all(|p| p[0] <= 2));
    assert_eq!(image::open(&side).unwrap().to_rgb8().dimensions(), (32, 16));
}

#[test]
fn segment_rejects_wrong_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = ast(&["train", "--config", s(&cfg), "--scenario", "bt", "--out", s(&run), "--steps", "2", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let big = dir.path().join("big.png");
    image::RgbImage::new(32, 32).save(&big).unwrap();
    let o = ast(&[
        "segment", "--ckpt", s(&run.join("final.ckpt")), "--image", s(&big), "--out", s(&dir.path().join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32x32"));
}

#[test]
fn seed_variable_is_used_unless_flag_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let gen = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ast"));
        c.args(["gen-data", "--config", s(&cfg), "--out", s(out), "--count", "1"]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        match env {
            Some(v) => c.env("AST_SEED", v),
            None => c.env_remove("AST_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        let info: Value = serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
        info["seed"].as_u64().unwrap()
    };
    assert_eq!(gen(&dir.path().join("a"), None, None), 0);
    assert_eq!(gen(&dir.path().join("b"), Some("17"), None), 17);
    assert_eq!(gen(&dir.path().join("c"), Some("17"), Some("3")), 3);
}

#[test]
fn verify_passes_with_summary() {
    let o = ast(&["verify"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}\n{}", stderr(&o));
    assert!(out.contains("checks passed"), "{out}");
}
