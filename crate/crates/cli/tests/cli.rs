use std::path::Path;
use std::process::{Command, Output};

fn imunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imunet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = imunet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let out = imunet(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_succeeds() {
    let out = imunet(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen", "train", "predict", "eval", "bench", "sweep"] {
        assert!(text.contains(cmd), "{cmd} missing from usage");
    }
}

#[test]
fn invalid_values_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!imunet(&["gen", "--out", s(dir.path()), "--dims", "16,16"]).status.success());
    assert!(!imunet(&["train", "--data", "/nonexistent", "--out", s(dir.path())]).status.success());
    let out = imunet(&["gen", "--out", s(dir.path()), "--num", "1", "--dims", "16,16,16", "--classes", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_train_predict_eval_bench_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let pred = root.path().join("pred");
    let cfg = root.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "seed = 3\n[synth]\nradius_range = [3.0, 5.0]\n[model]\nblock_channels = [2, 4, 4, 4]\nhidden = 16\n\
         [train]\nsteps = 50\nbatch_size = 4\n",
    )
    .unwrap();
    let c = s(&cfg);
    ok(&["gen", "--config", c, "--out", s(&data), "--num", "2", "--dims", "16,16,16"]);
    assert!(data.join("case_000_image.imvol").exists() && data.join("case_001_labels.imvol").exists());

    // flags override the file: 3 steps instead of 50
    ok(&[
        "train", "--config", c, "--data", s(&data), "--out", s(&run), "--patch", "16,16,16", "--batch", "1", "--steps",
        "3", "--k", "64", "--lr", "1e-3",
    ]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let ckpt = run.join("model.json");
    assert!(ckpt.exists() && run.join("model.bin").exists());

    let out = ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred), "--compare-dense"]);
    assert_eq!(out.lines().count(), 2);
    assert!(out.contains("dense_agreement_dice") && out.contains("broad_points"));
    assert!(pred.join("case_000_pred.imvol").exists());

    let report = root.path().join("eval.jsonl");
    ok(&["eval", "--data", s(&data), "--pred", s(&pred), "--out", s(&report)]);
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let dice = l["dice_per_class"].as_array().unwrap();
        assert_eq!(dice.len(), 1);
        assert!((0.0..=1.0).contains(&dice[0].as_f64().unwrap()));
    }
    assert_eq!(lines[2]["case"], "mean");

    let out = ok(&["bench", "--checkpoint", s(&ckpt), "--data", s(&data), "--spacing", "4"]);
    for line in out.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(r["sparse_evaluations"].as_u64().unwrap() <= r["dense_evaluations"].as_u64().unwrap());
        assert_eq!(r["sparse_broad_evaluations"], 64);
    }

    let out = ok(&["sweep", "--param", "spacing", "--values", "2,4", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(out.lines().count(), 2);
    assert!(out.contains("\"param\":\"spacing\""));
}

#[test]
fn trained_sweep_emits_one_record_per_value() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let cfg = root.path().join("small.toml");
    std::fs::write(&cfg, "[synth]\nradius_range = [2.0, 4.0]\n").unwrap();
    ok(&["gen", "--config", s(&cfg), "--out", s(&data), "--num", "1", "--dims", "16,16,16", "--seed", "1"]);
    let out = ok(&[
        "sweep", "--param", "k", "--values", "32,64", "--data", s(&data), "--patch", "16,16,16", "--batch", "1",
        "--steps", "2", "--channels", "2,2,2,2", "--hidden", "8",
    ]);
    let recs: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1]["value"], 64.0);
    assert!(recs[0]["final_loss"].as_f64().unwrap().is_finite());
}
