use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advseg::checkpoint::Checkpoint;
use advseg::pgm;

fn advseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = advseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    advseg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn checksum(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("checksum ")).unwrap().to_string()
}

/// The 8-sample smoke set: default generator, seed 7.
fn smoke_set(root: &Path) -> PathBuf {
    let ds = root.join("ds");
    ok(&["generate", "--count", "8", "--seed", "7", "--out", s(&ds)]);
    ds
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn generate_is_deterministic_and_guarded() {
    let t = tempfile::tempdir().unwrap();
    let a = ok(&["generate", "--count", "8", "--seed", "7", "--out", s(&t.path().join("a"))]);
    let b = ok(&["generate", "--count", "8", "--seed", "7", "--out", s(&t.path().join("b"))]);
    assert_eq!(checksum(&a), checksum(&b));
    let c = ok(&["generate", "--count", "8", "--seed", "8", "--out", s(&t.path().join("c"))]);
    assert_ne!(checksum(&a), checksum(&c));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("a/dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 8);
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 8);
    let resolved = |d: &str| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(t.path().join(d).join("config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("paths");
        v
    };
    assert_eq!(resolved("a"), resolved("b"));
    assert_eq!(resolved("a")["data"]["count"], 8);

    assert_eq!(code(&["generate", "--count", "0", "--out", s(&t.path().join("z"))]), 1);
    assert_eq!(code(&["generate", "--count", "8", "--seed", "7", "--out", s(&t.path().join("a"))]), 2);
    ok(&["generate", "--count", "8", "--seed", "7", "--out", s(&t.path().join("a")), "--force"]);
}

#[test]
fn usage_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--no-such-flag"]), 1);
    assert_eq!(code(&["train", "--variant", "fcn_rnn", "--out", s(t.path())]), 1);
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"training": {"lr": 0.1}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&t.path().join("o"))]), 1);
    assert_eq!(code(&["train", "--epsilon", "-1", "--out", s(&t.path().join("o"))]), 1);
}

#[test]
fn smoke_run_train_infer_eval() {
    let t = tempfile::tempdir().unwrap();
    let ds = smoke_set(t.path());
    let run = t.path().join("run");
    ok(&["train", "--dataset", s(&ds), "--variant", "fcn", "--epochs", "100", "--eval-every", "1", "--out", s(&run)]);

    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 200, "one row per epoch per split");
    let last_train = rows.iter().rev().find(|r| r[1] == "train").unwrap();
    let dice: f64 = last_train[3].parse().unwrap();
    assert!(dice > 0.95, "train dice {dice}");

    let resolved = fs::read_to_string(run.join("config.json")).unwrap();
    for key in ["\"learning_rate\": 0.003", "\"lambda\": 0.5", "\"steps_train\": 5", "\"steps_test\": 10"] {
        assert!(resolved.contains(key), "{key} missing from resolved config");
    }

    let ck = run.join("checkpoint.afcr");
    let img = ds.join("sample_0_img.pgm");
    let mask = ds.join("sample_0_mask.pgm");
    let inf = t.path().join("inf");
    let stdout = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&img), "--mask", s(&mask), "--out", s(&inf)]);
    let d: f64 = stdout.lines().find_map(|l| l.strip_prefix("dice ")).unwrap().parse().unwrap();
    assert!(d > 0.95, "infer dice {d}");
    let pred_path = inf.join("sample_0_img_mask.pgm");
    let first = (fs::read(&pred_path).unwrap(), fs::read(inf.join("sample_0_img_overlay.pgm")).unwrap());
    ok(&["infer", "--checkpoint", s(&ck), "--image", s(&img), "--out", s(&inf)]);
    assert_eq!(first, (fs::read(&pred_path).unwrap(), fs::read(inf.join("sample_0_img_overlay.pgm")).unwrap()));
    let raw = pgm::decode(&first.0).unwrap();
    assert!(raw.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let small = t.path().join("small.pgm");
    pgm::write(&small, &advseg::Tensor::full(&[20, 20], 0.5)).unwrap();
    assert_eq!(code(&["infer", "--checkpoint", s(&ck), "--image", s(&small), "--out", s(&inf)]), 2);

    let ev = t.path().join("ev");
    ok(&["eval", "--checkpoint", s(&ck), "--checkpoint-b", s(&ck), "--dataset", s(&ds), "--split", "test", "--out", s(&ev)]);
    let rows = csv_rows(&ev.join("metrics.csv"));
    assert_eq!(rows.len(), 2 * 6);
    let mc: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("mcnemar.json")).unwrap()).unwrap();
    assert_eq!(mc["p_value"], 1.0);

    // pooled dice recomputed from the saved per-sample confusion counts
    let per = csv_rows(&ev.join("per_sample.csv"));
    let a: Vec<&Vec<String>> = per.iter().take(per.len() / 2).collect();
    let n = |r: &Vec<String>, i: usize| r[i].parse::<u64>().unwrap();
    let (tp, fp, fn_) = a.iter().fold((0, 0, 0), |(x, y, z), r| (x + n(r, 3), y + n(r, 4), z + n(r, 5)));
    let recount = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
    let dice_row = rows.iter().find(|r| r[2] == "dice").unwrap();
    assert_eq!(dice_row[4].parse::<f64>().unwrap(), recount);

    assert_eq!(code(&["eval", "--checkpoint", s(&ck), "--dataset", s(&ds), "--split", "val", "--out", s(&t.path().join("e2"))]), 1);
}

#[test]
fn zero_radius_adv_fcn_reproduces_fcn() {
    let t = tempfile::tempdir().unwrap();
    let ds = smoke_set(t.path());
    let train = |variant: &str, out: &str| {
        let dir = t.path().join(out);
        ok(&["train", "--dataset", s(&ds), "--variant", variant, "--epsilon", "0", "--epochs", "3", "--seed", "5", "--out", s(&dir)]);
        dir
    };
    let a = train("adv_fcn", "adv");
    let b = train("fcn", "clean");
    let strip = |rows: Vec<Vec<String>>| rows.into_iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>();
    assert_eq!(strip(csv_rows(&a.join("metrics.csv"))), strip(csv_rows(&b.join("metrics.csv"))));
    let (ca, cb) = (Checkpoint::load(&a.join("checkpoint.afcr")).unwrap(), Checkpoint::load(&b.join("checkpoint.afcr")).unwrap());
    assert_eq!(ca.state, cb.state);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let ds = smoke_set(t.path());
    let straight = t.path().join("straight");
    let split = t.path().join("split");
    let common = ["--dataset", s(&ds), "--variant", "adv_fcn", "--seed", "3"];
    ok(&[&["train"], &common[..], &["--epochs", "4", "--out", s(&straight)]].concat());
    ok(&[&["train"], &common[..], &["--epochs", "2", "--out", s(&split)]].concat());
    let ck = split.join("checkpoint.afcr");
    let resumed_ck = t.path().join("half.afcr");
    fs::copy(&ck, &resumed_ck).unwrap();
    ok(&["train", "--resume", s(&resumed_ck), "--epochs", "4", "--out", s(&split)]);

    assert_eq!(fs::read(straight.join("metrics.csv")).unwrap(), fs::read(split.join("metrics.csv")).unwrap());
    let a = Checkpoint::load(&straight.join("checkpoint.afcr")).unwrap();
    let b = Checkpoint::load(&split.join("checkpoint.afcr")).unwrap();
    assert_eq!(a.state, b.state);
}

#[test]
fn equal_configs_give_identical_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let ds = smoke_set(t.path());
    let run = |out: &str| {
        let dir = t.path().join(out);
        ok(&["train", "--dataset", s(&ds), "--variant", "fcn_crf", "--epochs", "1", "--crf-steps-train", "2", "--out", s(&dir)]);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let (ca, cb) = (Checkpoint::load(&a.join("checkpoint.afcr")).unwrap(), Checkpoint::load(&b.join("checkpoint.afcr")).unwrap());
    assert_eq!(ca.state, cb.state);
}

#[test]
fn numerical_failure_keeps_last_good_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let ds = smoke_set(t.path());
    let out = t.path().join("nan");
    assert_eq!(code(&["train", "--dataset", s(&ds), "--variant", "fcn", "--epochs", "3", "--lr", "1e306", "--out", s(&out)]), 3);
    let ck = Checkpoint::load(&out.join("checkpoint.afcr")).unwrap();
    assert!(ck.state.all_finite());
}

#[test]
fn selftest_passes_and_reports_each_check() {
    let out = ok(&["selftest"]);
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(lines.len() > 40);
    assert!(lines.iter().all(|l| l.starts_with("PASS") && l.contains("measured")));
}
