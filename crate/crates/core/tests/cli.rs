use std::path::Path;
use std::process::{Command, Output};

fn ground3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ground3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, edits: &[(&str, serde_json::Value)]) -> String {
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/desk.json")).unwrap();
    cfg["hidden_dim"] = 16.into();
    cfg["epochs"] = 2.into();
    cfg["batch_scenes"] = 4.into();
    for (k, v) in edits {
        cfg[*k] = v.clone();
    }
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&ground3d(&["frobnicate"])), 1);
    assert_eq!(code(&ground3d(&["train", "--data", "x.jsonl"])), 1);
    assert_eq!(code(&ground3d(&["--help"])), 0);
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();

    let out = ground3d(&["gen-data", "--scenes", "12", "--seed", "1", "--out", &s("train.jsonl")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for side in ["train.jsonl", "train.vocab.json", "train.meta.json", "train.embeddings.json"] {
        assert!(d.join(side).exists(), "{side} missing");
    }
    assert_eq!(code(&ground3d(&["gen-data", "--scenes", "4", "--seed", "2", "--out", &s("test.jsonl")])), 0);

    let cfg = write_config(d, "cfg.json", &[]);
    let out = ground3d(&["train", "--data", &s("train.jsonl"), "--config", &cfg, "--out", &s("run")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = s("run/best.ckpt");

    let nce = write_config(d, "nce.json", &[("method", "mil_nce".into())]);
    assert_eq!(code(&ground3d(&["train", "--data", &s("train.jsonl"), "--config", &nce, "--out", &s("nce")])), 0);

    let out = ground3d(&[
        "eval", "--ckpt", &ckpt, "--data", &s("test.jsonl"), "--report", &s("report.csv"), "--baseline", &s("nce/best.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,split,n,m,recall,num_queries,seed,config_hash\n"));
    for method in ["full", "mil_nce", "random", "upper_bound"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{method},overall,1,0.5,"))), "{method} row missing");
    }

    let records = std::fs::read_to_string(d.join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    let scene_id = first["scene_id"].as_str().unwrap();
    let out = ground3d(&[
        "export-viz", "--data", &s("test.jsonl"), "--ckpt", &ckpt, "--scene-id", scene_id, "--out", &s("viz.json"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let viz: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("viz.json")).unwrap()).unwrap();
    assert_eq!(viz["scene_id"], scene_id);

    assert_eq!(
        code(&ground3d(&["export-viz", "--data", &s("test.jsonl"), "--ckpt", &ckpt, "--scene-id", "nope", "--out", &s("v.json")])),
        1
    );

    let ablation_cfg = write_config(d, "abl.json", &[]);
    let out = ground3d(&["ablate", "--data", &s("train.jsonl"), "--config", &ablation_cfg, "--out", &s("ablation.csv")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("ablation.csv")).unwrap();
    for row in ["match_only", "cls_only", "cls_match", "cls_match_recon", "random"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{row},"))), "{row} row missing");
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    assert_eq!(code(&ground3d(&["gen-data", "--scenes", "6", "--seed", "0", "--out", &s("c.jsonl")])), 0);

    let bad = write_config(d, "bad.json", &[("top_k", 0.into())]);
    assert_eq!(code(&ground3d(&["train", "--data", &s("c.jsonl"), "--config", &bad, "--out", &s("r")])), 1);

    let cfg = write_config(d, "cfg.json", &[]);
    assert_eq!(code(&ground3d(&["train", "--data", &s("missing.jsonl"), "--config", &cfg, "--out", &s("r")])), 2);
    assert_eq!(code(&ground3d(&["eval", "--ckpt", &s("none.ckpt"), "--data", &s("c.jsonl"), "--report", &s("r.csv")])), 2);

    let tight = write_config(d, "tight.json", &[("divergence_threshold", 1e-3.into())]);
    assert_eq!(code(&ground3d(&["train", "--data", &s("c.jsonl"), "--config", &tight, "--out", &s("r")])), 3);
}
