use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_switch-spaces"));
    c.env("RUST_LOG", "warn");
    c
}

/// Binary tree on 31 nodes with one `child_of` relation.
fn write_tree(dir: &Path) {
    let mut train = String::new();
    let mut valid = String::new();
    for i in 1..31 {
        let line = format!("n{i}\tchild_of\tn{}\n", (i - 1) / 2);
        if i % 10 == 0 {
            valid.push_str(&line);
        } else {
            train.push_str(&line);
        }
    }
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("valid.txt"), &valid).unwrap();
    fs::write(dir.join("test.txt"), &valid).unwrap();
}

fn write_ratings(path: &Path) {
    let mut s = String::new();
    for u in 1..=12 {
        for j in 0..10 {
            s.push_str(&format!("{u}\t{}\t4\t0\n", (u * 3 + j) % 25 + 1));
        }
    }
    fs::write(path, s).unwrap();
}

fn json_of(out: &std::process::Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn kg_train_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let run = dir.path().join("run");
    let cfg = dir.path().join("kg.cfg");
    fs::write(
        &cfg,
        format!(
            "task = kg\nsignature = P6,P6,E6,E6,D6\nk = 2\nepochs = 3\nn_neg = 5\nbatch_size = 16\ndata = {}\noutput = {}\n",
            dir.path().display(),
            run.display()
        ),
    )
    .unwrap();
    let trained = json_of(&bin().args(["train", "--config"]).arg(&cfg).output().unwrap());
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("config.txt").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
    let gates = dir.path().join("gates.csv");
    let eval = json_of(
        &bin()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(run.join("model.ckpt"))
            .arg("--log-gates")
            .arg(&gates)
            .output()
            .unwrap(),
    );
    assert_eq!(eval["metrics"]["mrr"], trained["runs"][0]["test"]["mrr"]);
    let csv = fs::read_to_string(&gates).unwrap();
    assert!(csv.starts_with("active_set,count\n"));
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(fs::read_to_string(gates.with_extension("jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--task", "kg", "--signature", "E4", "--epochs", "0", "--gate", "flat-linear"])
        .arg("--data")
        .arg(dir.path())
        .arg("--output")
        .arg(&run)
        .output()
        .unwrap();
    let v = json_of(&out);
    assert!(run.join("model.ckpt").exists());
    assert!(v["mean"]["mrr"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn rec_train_with_seed_list_averages() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("u.data");
    write_ratings(&ratings);
    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--task", "rec", "--signature", "E4,E4,E4", "--k", "2", "--epochs", "2", "--seeds", "1,2"])
        .arg("--data")
        .arg(&ratings)
        .arg("--output")
        .arg(&run)
        .output()
        .unwrap();
    let v = json_of(&out);
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert!(run.join("model-seed1.ckpt").exists());
    let a = v["runs"][0]["test"]["map"].as_f64().unwrap();
    let b = v["runs"][1]["test"]["map"].as_f64().unwrap();
    assert!((v["mean"]["map"].as_f64().unwrap() - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn signature_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let run = dir.path().join("run");
    let common = |c: &mut Command| {
        c.args(["--task", "kg", "--gate", "flat-linear", "--epochs", "0"]).arg("--data").arg(dir.path()).arg("--output").arg(&run);
    };
    let mut t = bin();
    t.args(["train", "--signature", "E4"]);
    common(&mut t);
    json_of(&t.output().unwrap());
    let mut e = bin();
    e.args(["eval", "--signature", "E6"]).arg("--checkpoint").arg(run.join("model.ckpt"));
    common(&mut e);
    let out = e.output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[31, 4]") && err.contains("6"), "{err}");
}

#[test]
fn time_sweep_reports_each_n() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let run = dir.path().join("run");
    let mut t = bin();
    t.args(["train", "--task", "kg", "--signature", "E4", "--epochs", "0", "--gate", "flat-linear"])
        .arg("--data")
        .arg(dir.path())
        .arg("--output")
        .arg(&run);
    json_of(&t.output().unwrap());
    let v = json_of(
        &bin()
            .args(["eval", "--task", "kg", "--signature", "E4", "--gate", "flat-linear", "--k", "1", "--time-sweep", "5,10", "--sweep-dim", "8"])
            .arg("--data")
            .arg(dir.path())
            .arg("--checkpoint")
            .arg(run.join("model.ckpt"))
            .output()
            .unwrap(),
    );
    let rows = v["time_sweep"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["n"], 10);
    assert_eq!(rows[0]["evals_per_example"], 1.0);
}

#[test]
fn bad_override_is_rejected() {
    let out = bin().args(["train", "--task", "kg", "--signature", "E4", "--set", "nonsense=1"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["train", "--task", "kg", "--signature", "E4,E4", "--k", "3"]).output().unwrap();
    assert!(!out.status.success());
}
