use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atkf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atkf")).args(args).output().expect("binary runs")
}

/// A configuration small enough to run the whole pipeline in seconds.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = r#"{
        "n_train": 6, "n_val": 3, "n_test": 4, "l_test": 12, "particles": 20,
        "train": {"pretrain_epochs": 2, "train_epochs": 3, "batch_size": 3}
    }"#;
    fs::write(&path, cfg).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn reproduce_writes_requested_levels_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let run = atkf(&["reproduce", "--config", &cfg, "--out", out.to_str().unwrap(), "--levels", "4", "--seed", "7"]);
        assert!(run.status.success(), "{}", stderr(&run));
        let table = String::from_utf8(run.stdout).unwrap();
        assert!(table.contains("noise study") && table.contains("mismatch study"));
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "regime,filter,q2=4");
    assert_eq!(summary.lines().count(), 1 + 2 * 4);
    for f in ["results.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.lines().skip(1).all(|l| l.split(',').nth(2) == Some("4")));
}

#[test]
fn stages_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", &cfg, "--out", out.to_str().unwrap(), "--levels", "1", "--regime", "mismatch"];
    for stage in ["generate", "train", "eval"] {
        let mut args = vec![stage];
        args.extend(common);
        if stage == "train" {
            args.push("--skip-pretrain");
        }
        if stage == "eval" {
            args.extend(["--trajectory-dump", "2", "--particles", "10"]);
        }
        let run = atkf(&args);
        assert!(run.status.success(), "{stage}: {}", stderr(&run));
    }
    let log = fs::read_to_string(out.join("logs/mismatch/q2_1.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(log.lines().skip(1).all(|l| l.starts_with("e2e,")));
    assert!(!out.join("data/q2_1/pretrain_mismatch.json").exists());
    assert!(!out.join("models/noise").exists());
    let dump = fs::read_to_string(out.join("trajectories/mismatch_q2_1_2.csv")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 12);
    assert!(dump.starts_with("step,true_x1,true_x2,EKF_x1"));
}

#[test]
fn failures_are_tagged_with_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let run = atkf(&["generate", "--config", missing.to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("[config]"), "{}", stderr(&run));

    let run = atkf(&["eval", "--out", dir.path().join("empty").to_str().unwrap(), "--levels", "2"]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("[eval]"), "{}", stderr(&run));

    let run = atkf(&["generate", "--levels=0", "--out", dir.path().to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("[config]"));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!atkf(&["reproduce", "--regime", "chaos"]).status.success());
    assert!(!atkf(&["reproduce", "--levels", "one"]).status.success());
    assert!(!atkf(&[]).status.success());
    assert!(atkf(&["--help"]).status.success());
}
