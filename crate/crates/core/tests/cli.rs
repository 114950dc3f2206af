use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glt-track"));
    c.env("RUST_LOG", "warn");
    c
}

const TINY_CONFIG: &str = r#"{
  "model": {
    "backbone": {"n_t": 32, "n_s": 64, "m_s": 32, "d": 8, "group_k": 8, "point_mlp": [8, 8]},
    "c": 8, "m": 4, "n": 4, "proposals": 4
  },
  "train": {"steps": 3, "batch_size": 1, "checkpoint_every": 2},
  "data": {
    "train": {"kind": "synthetic", "sequences": 2, "generator": {"frames": 4, "target_points": 64, "clutter": 10}},
    "eval": {"kind": "synthetic", "sequences": 1, "seed": 5, "generator": {"frames": 4, "target_points": 64, "clutter": 10}}
  }
}"#;

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn gen_train_track_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let spec = root.join("synth.json");
    fs::write(&spec, r#"{"sequences": 2, "seed": 9, "generator": {"frames": 4, "target_points": 64}}"#).unwrap();

    run_ok(bin().args(["gen", "--spec"]).arg(&spec).arg("--out").arg(root.join("data")));
    assert!(root.join("data/seq_001/manifest.txt").is_file());

    run_ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(root.join("run")));
    let loss = fs::read_to_string(root.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("step,l_off,l_imp,l_score,l_center_rot,total"));
    assert!(root.join("run/checkpoints/step_000002.bin").is_file());
    let ckpt = root.join("run/checkpoint.bin");

    let boxes = root.join("boxes.csv");
    run_ok(bin().args(["track", "--checkpoint"]).arg(&ckpt).arg("--sequence").arg(root.join("data/seq_000")).arg("--out").arg(&boxes));
    let text = fs::read_to_string(&boxes).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);

    let report = root.join("eval/report.json");
    run_ok(bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--data").arg(root.join("data")).arg("--report").arg(&report));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["frames"], 2 * 3);
    assert!(Path::new(&root.join("eval/report.frames.csv")).is_file());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bad = root.join("bad.json");
    fs::write(&bad, r#"{"model": {"proposals": 0}}"#).unwrap();
    assert_eq!(exit_code(bin().args(["train", "--config"]).arg(&bad).arg("--out").arg(root.join("x"))), 2);
    assert_eq!(exit_code(bin().args(["ablate", "--axis", "q", "--values", "1", "--out"]).arg(root.join("a.csv"))), 2);
    assert_eq!(exit_code(bin().args(["ablate", "--axis", "m", "--values", "5", "--out"]).arg(root.join("a.csv"))), 2);

    let garbage = root.join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let code = exit_code(bin().args(["eval", "--checkpoint"]).arg(&garbage).arg("--report").arg(root.join("r.json")));
    assert_eq!(code, 2);
    let code = exit_code(bin().args(["track", "--checkpoint"]).arg(root.join("missing.bin")).arg("--sequence").arg(root).arg("--out").arg(root.join("o.csv")));
    assert_eq!(code, 3);
}
