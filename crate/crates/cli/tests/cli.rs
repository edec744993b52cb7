use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshcontact")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_infer_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, "[train]\nmax_epochs = 1\nbatch_size = 4\n").unwrap();
    let (data, val, run_dir, report) = (d.join("data"), d.join("val"), d.join("run"), d.join("report"));

    let summary = ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "10", "--seed", "5"]);
    assert!(summary.contains("samples      10"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&val), "--count", "4", "--seed", "6"]);

    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--val", s(&val), "--out", s(&run_dir)]);
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "epoch,lr,L_m,L_cls_A,L_cls_B,L_sem,L_bp,L_all,val_L_all");
    assert_eq!(lines.count(), 1);

    let ckpt = run_dir.join("model.ckpt");
    let rows = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--report", s(&report)]);
    assert_eq!(rows.lines().count(), 2);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 8);
    for k in ["precision", "recall", "f1", "geo_cm", "mpve_mm", "mpjpe_mm", "pa_mpjpe_mm", "n_samples"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert_eq!(json["n_samples"], 4);
    let text = std::fs::read_to_string(report.join("metrics.txt")).unwrap();
    assert!(text.contains("f1=") && text.contains("config_hash="));

    let infer_dir = d.join("infer");
    ok(&["infer", "--checkpoint", s(&ckpt), "--sample", s(&val.join("sample_00000.bin")), "--out", s(&infer_dir)]);
    let obj = std::fs::read_to_string(infer_dir.join("mesh.obj")).unwrap();
    assert!(obj.starts_with("# config_hash="));
    let verts = obj.lines().filter(|l| l.starts_with("v ")).count();
    assert!(verts > 0);
    for f in obj.lines().filter(|l| l.starts_with("f ")) {
        for i in f[2..].split(' ') {
            let i: usize = i.parse().unwrap();
            assert!((1..=verts).contains(&i));
        }
    }
    let probs = std::fs::read_to_string(infer_dir.join("probs.txt")).unwrap();
    assert_eq!(probs.lines().filter(|l| !l.starts_with('#')).count(), verts);
    assert!(infer_dir.join("contacts.txt").exists());

    let grid_dir = d.join("grid");
    let grid = ok(&[
        "ablate", "--config", s(&cfg), "--data", s(&data), "--paths", "1,2", "--seeds", "1", "--report", s(&grid_dir),
    ]);
    assert!(grid.contains("TARM") && grid.contains("Masking"));
    assert!(grid_dir.join("grid.txt").exists() && grid_dir.join("grid.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[train]\nlr = \"fast\"\n").unwrap();
    let out = run(&["gen-data", "--config", s(&bad), "--out", s(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let invalid = d.join("invalid.toml");
    std::fs::write(&invalid, "[simu]\nn_paths = 9\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&invalid), "--out", s(&d.join("x"))]).status.code(), Some(2));

    let missing = run(&["eval", "--checkpoint", s(&d.join("none.ckpt")), "--data", s(d)]);
    assert_eq!(missing.status.code(), Some(3));

    let junk = d.join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", s(&junk), "--data", s(d)]).status.code(), Some(3));
}

#[test]
fn runaway_learning_rate_exits_with_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "5", "--seed", "3"]);
    let out = run(&["train", "--data", s(&data), "--out", s(&d.join("run")), "--epochs", "2", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
