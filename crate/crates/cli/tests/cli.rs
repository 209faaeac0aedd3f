use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fvlm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvlm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// A configuration small enough to run every command in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "data": {
            "image_size": 64,
            "max_objects": 2,
            "min_object_size": 12.0,
            "max_object_size": 28.0,
            "train_images": 6,
            "val_images": 3,
            "caption_images": 48,
        },
        "vlm": {
            "image_size": 64,
            "widths": [4, 8, 8],
            "embed_dim": 8,
            "pool_heads": 2,
            "text_width": 8,
            "text_heads": 2,
            "text_ffn": 16,
            "text_layers": 1,
            "steps": 3,
            "batch_size": 8,
            "warmup_steps": 1,
        },
        "detector": {
            "fpn_channels": 8,
            "head_hidden": 16,
            "mask_hidden": 4,
            "rpn_pre_nms_top_k": 100,
            "rpn_train_top_k": 32,
            "rpn_eval_top_k": 20,
            "rpn_batch": 32,
            "roi_batch": 8,
            "steps": 2,
            "batch_size": 2,
            "warmup_steps": 1,
        },
        "eval": { "runs": 1, "transfer_images": 2 },
        "probe": { "images": 2 },
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn metrics(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fvlm(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fvlm(&["eval", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_override_key_is_a_usage_error_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = fvlm(&["eval", "--override", "detector.no_such_knob=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage:"), "{err}");
    assert!(err.contains("no_such_knob"), "{err}");
}

#[test]
fn unknown_config_file_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"fusion": {"alpha": 0.3, "gamma": 1}}"#).unwrap();
    let o = fvlm(&["eval", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = fvlm(&["eval", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: runtime:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn bad_ablation_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fvlm(&["ablate", "--axis", "beta", "--values", "0,high"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fvlm(&["ablate", "--axis", "gamma", "--values", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    ok(&fvlm(&["make-data", "--skip-captions", "--config", cfg.to_str().unwrap(), "--seed", "9"], &a));
    let resolved = a.join("config.resolved.json");
    let b = dir.path().join("b");
    ok(&fvlm(&["make-data", "--skip-captions", "--config", resolved.to_str().unwrap()], &b));
    assert_eq!(
        fs::read(&resolved).unwrap(),
        fs::read(b.join("config.resolved.json")).unwrap()
    );
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    let r: Value = serde_json::from_slice(&fs::read(&resolved).unwrap()).unwrap();
    assert_eq!(r["seed"], 9);
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let cache = dir.path().join("cache");

    ok(&fvlm(&["make-data", "--config", cfg], &out));
    assert!(out.join("data/train").exists() && out.join("data/captions").exists());

    ok(&fvlm(&["pretrain", "--config", cfg], &out));
    assert!(out.join("checkpoints/vlm").exists());
    let m = metrics(&out);
    let acc = m["pretrain"]["zero_shot_top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = Command::new(env!("CARGO_BIN_EXE_fvlm"))
        .args(["train", "--config", cfg, "--out"])
        .arg(&out)
        .env("FVLM_CACHE_DIR", &cache)
        .output()
        .unwrap();
    ok(&o);
    assert!(out.join("checkpoints/detector-0").exists());
    assert!(fs::read_dir(&cache).unwrap().count() > 0, "embedding cache written");
    let timing: Value = serde_json::from_str(&fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert!(timing["train"]["runs"][0]["report"]["step_time_ms"].as_f64().unwrap() > 0.0);
    assert!(metrics(&out)["train"]["runs"][0]["report"].get("step_time_ms").is_none());

    ok(&fvlm(&["eval", "--config", cfg], &out));
    let first = fs::read(out.join("metrics.json")).unwrap();
    assert!(metrics(&out)["eval"]["ap_all"]["mean"].is_number());
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().starts_with("category,novel,ap"));
    ok(&fvlm(&["eval", "--config", cfg], &out));
    assert_eq!(first, fs::read(out.join("metrics.json")).unwrap(), "eval is deterministic");

    ok(&fvlm(&["eval-transfer", "--config", cfg], &out));
    let t = &metrics(&out)["eval-transfer"]["betas"];
    assert_eq!(t.as_array().unwrap().len(), 3);
    assert_eq!(t[0]["alpha_reads"], 0);
    assert_eq!(t[0]["checkpoint_digest_before"], t[0]["checkpoint_digest_after"]);

    let image = out.join("data/val/images/000001.png");
    let image = if image.exists() {
        image
    } else {
        fs::read_dir(out.join("data/val/images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "png"))
            .unwrap()
    };
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, "red circle\npurple star\n").unwrap();
    ok(&fvlm(
        &["detect", "--config", cfg, "--image", image.to_str().unwrap(), "--vocab-file", vocab.to_str().unwrap()],
        &out,
    ));
    let dets: Value = serde_json::from_str(&fs::read_to_string(out.join("detections.json")).unwrap()).unwrap();
    for d in dets.as_array().unwrap() {
        assert!([1, 2].contains(&d["category_id"].as_u64().unwrap()));
        assert_eq!(d["bbox"].as_array().unwrap().len(), 4);
    }
    assert!(out.join("overlay.png").exists());

    ok(&fvlm(&["ablate", "--config", cfg, "--axis", "beta", "--values", "0,0.65,1"], &out));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");

    let vlm = out.join("checkpoints/vlm");
    let ft_out = dir.path().join("ft");
    ok(&fvlm(
        &["train", "--config", cfg, "--vlm", vlm.to_str().unwrap(), "--override", "detector.backbone_lr=1e-3"],
        &ft_out,
    ));
    let frozen = &metrics(&out)["train"]["runs"][0]["report"];
    let ft = &metrics(&ft_out)["train"]["runs"][0]["report"];
    assert_eq!(ft["finetuned"], true);
    assert_eq!(frozen["finetuned"], false);
    assert!(ft["trainable_params"].as_u64() > frozen["trainable_params"].as_u64());
    assert!(frozen["backbone_changed"].as_array().unwrap().is_empty());

    ok(&fvlm(&["probe", "--config", cfg, "--visualize", "1"], &out));
    let p = &metrics(&out)["probe"];
    assert_eq!(p["k"], 6);
    assert!(out.join("probe").read_dir().unwrap().count() >= 2);
}
