use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cascadereg")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_register_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let case = data.join("case0");
    run(&["synth", "--seed", "2", "--size", "32", "--out", s(&case)]);
    assert!(case.join("gt_field.nii.gz").exists());
    assert!(case.join("post_landmarks.csv").exists());

    run(&["preprocess", "--case", s(&case)]);
    assert!(case.join("post_t1ce_pp.nii.gz").exists());

    let config = tmp.path().join("train.toml");
    std::fs::write(&config, "[train]\nsteps_per_epoch = 2\nlr_initial = 1e-3\n").unwrap();
    let run_dir = tmp.path().join("run");
    run(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run_dir)]);
    let log = std::fs::read_to_string(run_dir.join("train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["l_total"].as_f64().unwrap().is_finite());
    }

    let reg = tmp.path().join("reg");
    run(&["register", "--ckpt", s(&run_dir), "--case", s(&case), "--out", s(&reg)]);
    for f in ["field.nii.gz", "warped_t1ce.nii.gz", "score.json"] {
        assert!(reg.join(f).exists(), "missing {f}");
    }
    let score: serde_json::Value = serde_json::from_slice(&std::fs::read(reg.join("score.json")).unwrap()).unwrap();
    assert!(score["total"]["median_ae"].as_f64().unwrap() >= 0.0);

    let csv = tmp.path().join("eval.csv");
    run(&["evaluate", "--ckpt", s(&run_dir.join("checkpoint.tar")), "--data", s(&data), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("Case,Median Absolute Error (mm)"));
    assert!(lines[1].starts_with("case0,"));
    assert!(lines.iter().any(|l| l.starts_with("pooled,")));
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cascadereg"))
        .args(["register", "--ckpt", s(&tmp.path().join("nope.tar")), "--case", s(tmp.path()), "--out", s(tmp.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
