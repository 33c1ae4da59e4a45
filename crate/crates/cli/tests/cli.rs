use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn madp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_madp"))
        .current_dir(dir)
        .env_remove("MADP_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = madp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn history(dir: &Path) -> Vec<(usize, f64, f64)> {
    fs::read_to_string(dir.join("history.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

fn small_dataset(dir: &Path, name: &str) {
    ok(dir, &["generate", "--preset", "desk", "--examples", "30", "--seed", "4", "--out", name]);
}

#[test]
fn generate_is_reproducible_and_split_70_20_10() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["generate", "--preset", "desk", "--examples", "10", "--seed", "1", "--out", "a"]);
    ok(t.path(), &["generate", "--preset", "desk", "--examples", "10", "--seed", "1", "--out", "b"]);
    let mut names: Vec<_> = fs::read_dir(t.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(fs::read(t.path().join("a").join(&n)).unwrap(), fs::read(t.path().join("b").join(&n)).unwrap());
    }
    let m = read_json(&t.path().join("a/manifest.json"));
    assert_eq!(m["split_sizes"], serde_json::json!([7, 2, 1]));
}

#[test]
fn missing_config_fails_without_partial_output() {
    let t = TempDir::new().unwrap();
    let out = madp(t.path(), &["generate", "--config", "absent.json", "--out", "ds"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 0);
}

#[test]
fn bad_config_field_is_rejected() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("c.json"), r#"{"world": {"num_robts": 3}}"#).unwrap();
    let out = madp(t.path(), &["generate", "--config", "c.json", "--out", "ds"]);
    assert_eq!(code(&out), 2);
    assert!(!t.path().join("ds").exists());
}

#[test]
fn usage_errors_exit_1() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&madp(t.path(), &["rollout", "--policy", "dcvt", "--out", "x", "--frobnicate"])), 1);
    assert_eq!(code(&madp(t.path(), &["eval", "--suite", "figure9", "--policy", "dcvt", "--out", "x"])), 1);
    assert_eq!(code(&madp(t.path(), &["rollout", "--policy", "oracle", "--out", "x"])), 1);
    assert_eq!(code(&madp(t.path(), &["rollout", "--policy", "dcvt", "--scenario", "ring", "--out", "x"])), 1);
    assert_eq!(code(&madp(t.path(), &["rollout", "--policy", "dcvt", "--seeds", "5..2", "--out", "x"])), 1);
    // exactly one policy source
    assert_eq!(code(&madp(t.path(), &["rollout", "--out", "x"])), 1);
    assert_eq!(code(&madp(t.path(), &["rollout", "--policy", "dcvt", "--checkpoint", "c", "--out", "x"])), 1);
    assert!(!t.path().join("x").exists());
}

#[test]
fn help_documents_every_flag() {
    let t = TempDir::new().unwrap();
    let help = String::from_utf8(ok(t.path(), &["eval", "--help"]).stdout).unwrap();
    for flag in [
        "--suite", "--checkpoint", "--policy", "--sample-steps", "--eta", "--clip", "--mode", "--world-config", "--preset", "--steps",
        "--seeds", "--jobs", "--compare", "--range", "--baseline", "--robots", "--features", "--scenarios", "--runs",
        "--robot", "--out",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    for sub in ["generate", "train", "rollout"] {
        let h = String::from_utf8(ok(t.path(), &[sub, "--help"]).stdout).unwrap();
        assert!(h.contains("--out"));
    }
}

#[test]
fn training_resumes_and_reduces_loss() {
    let t = TempDir::new().unwrap();
    small_dataset(t.path(), "ds");
    ok(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--epochs", "4", "--out", "run"]);
    let h = history(&t.path().join("run"));
    assert_eq!(h.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert!(h[3].1 < h[0].1, "training loss did not drop: {h:?}");
    assert!(t.path().join("run/best/params.bin").is_file());

    // a second fresh run into the same directory is refused
    assert_eq!(code(&madp(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--epochs", "4", "--out", "run"])), 2);

    ok(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--epochs", "6", "--out", "run", "--resume"]);
    let h2 = history(&t.path().join("run"));
    assert_eq!(h2.len(), 6);
    assert_eq!(&h2[..4], &h[..]);
    let m = read_json(&t.path().join("run/manifest.json"));
    assert_eq!(m["first_epoch"], 4);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let t = TempDir::new().unwrap();
    small_dataset(t.path(), "ds");
    fs::write(t.path().join("tc.json"), r#"{"learning_rate": 0.0, "batch_size": 8, "max_epochs": 1, "patience": 1}"#).unwrap();
    ok(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--train-config", "tc.json", "--out", "one"]);
    ok(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--train-config", "tc.json", "--epochs", "3", "--out", "three"]);
    let params = |d: &str| {
        let dir = t.path().join(d).join("last");
        let mut files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        files.sort();
        files.into_iter().filter(|p| p.extension().is_some_and(|e| e != "json")).map(|p| fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (params("one"), params("three"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn expert_rollouts_pair_on_seeds() {
    let t = TempDir::new().unwrap();
    let args = |p: &'static str, out: &'static str| {
        ["rollout", "--policy", p, "--preset", "desk", "--steps", "6", "--seeds", "3..5,9", "--out", out]
    };
    ok(t.path(), &args("dcvt", "d"));
    ok(t.path(), &args("clairvoyant", "c"));
    let rows = |d: &str| fs::read_to_string(t.path().join(d).join("rollouts.csv")).unwrap();
    let (d, c) = (rows("d"), rows("c"));
    assert_eq!(d.lines().count(), 1 + 3 * 7);
    assert_eq!(d.lines().next(), Some("timestep,seed,policy,cost,normalized_cost"));
    // same seeds give the same starting cost
    let starts = |s: &str| s.lines().skip(1).filter(|l| l.starts_with("0,")).map(|l| l.split(',').nth(3).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(starts(&d), starts(&c));
    assert_eq!(read_json(&t.path().join("d/manifest.json"))["seeds"], serde_json::json!([3, 4, 9]));

    // byte-reproducible
    ok(t.path(), &args("dcvt", "d2"));
    assert_eq!(rows("d2"), d);
}

#[test]
fn learned_policy_rollout_and_fan() {
    let t = TempDir::new().unwrap();
    small_dataset(t.path(), "ds");
    ok(t.path(), &["train", "--preset", "desk", "--dataset", "ds", "--epochs", "1", "--out", "run"]);
    let roll = ["rollout", "--checkpoint", "run", "--preset", "desk", "--steps", "3", "--seeds", "0..2", "--sample-steps", "5"];
    ok(t.path(), &[&roll[..], &["--out", "r1"]].concat());
    ok(t.path(), &[&roll[..], &["--out", "r2"]].concat());
    let a = fs::read_to_string(t.path().join("r1/rollouts.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 2 * 4);
    assert_eq!(a, fs::read_to_string(t.path().join("r2/rollouts.csv")).unwrap());

    ok(t.path(), &["eval", "--suite", "fan", "--checkpoint", "run", "--preset", "desk", "--steps", "3", "--seeds", "7", "--runs", "2", "--sample-steps", "5", "--clip", "0", "--out", "fan"]);
    let fan = fs::read_to_string(t.path().join("fan/fan.csv")).unwrap();
    assert_eq!(fan.lines().next(), Some("run,timestep,x,y,final_normalized_cost"));
    assert_eq!(fan.lines().count(), 1 + 2 * 4);

    // a checkpoint for a different world size is refused
    let out = madp(t.path(), &["rollout", "--checkpoint", "run", "--preset", "full", "--steps", "1", "--seeds", "0", "--out", "r3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_suites_write_their_csvs() {
    let t = TempDir::new().unwrap();
    let common = ["--preset", "desk", "--steps", "4", "--seeds", "0..3"];
    ok(t.path(), &[&["eval", "--suite", "sigma", "--policy", "clairvoyant", "--compare", "dcvt", "--range", "40,60", "--range", "10,20", "--out", "s"][..], &common].concat());
    let s = fs::read_to_string(t.path().join("s/sigma.csv")).unwrap();
    assert_eq!(s.lines().count(), 1 + 2 * 2);
    assert!(s.lines().nth(1).unwrap().starts_with("40,60,clairvoyant,3,"));
    assert_eq!(read_json(&t.path().join("s/manifest.json"))["ranges"], serde_json::json!([[40.0, 60.0], [10.0, 20.0]]));

    ok(t.path(), &[&["eval", "--suite", "init", "--policy", "dcvt", "--out", "i"][..], &common].concat());
    let i = fs::read_to_string(t.path().join("i/init.csv")).unwrap();
    assert_eq!(i.lines().collect::<Vec<_>>()[0], "scenario,policy,n,mean,stderr");
    assert_eq!(i.lines().count(), 4);

    ok(t.path(), &[&["eval", "--suite", "scale", "--policy", "clairvoyant", "--robots", "2,3", "--features", "1,2,4", "--out", "g"][..], &common].concat());
    let g = fs::read_to_string(t.path().join("g/scale.csv")).unwrap();
    assert_eq!(g.lines().next(), Some("num_robots,num_features,policy_mean,baseline_mean,percent_difference"));
    assert_eq!(g.lines().count(), 1 + 6);

    assert_eq!(code(&madp(t.path(), &[&["eval", "--suite", "sigma", "--policy", "dcvt", "--range", "60,40", "--out", "bad"][..], &common].concat())), 1);
    assert!(!t.path().join("bad").exists());
}

#[test]
fn output_dir_env_resolves_relative_paths() {
    let t = TempDir::new().unwrap();
    let base = t.path().join("results");
    let out = Command::new(env!("CARGO_BIN_EXE_madp"))
        .current_dir(t.path())
        .env("MADP_OUTPUT_DIR", &base)
        .args(["rollout", "--policy", "zero", "--preset", "desk", "--steps", "2", "--seeds", "1", "--out", "r"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(base.join("r/rollouts.csv").is_file());
    assert!(!t.path().join("r").exists());
}
