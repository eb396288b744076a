mod common;

use common::fixture;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mile")).args(args).output().unwrap()
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_params_reports_lora_row() {
    let o = mile(&["count-params", "--config", config("paper.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("trainable parameters: 589,824"), "{out}");
    assert!(out.contains("#Params: 0.163%"), "{out}");
}

#[test]
fn count_params_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    let o = mile(&[
        "count-params",
        "--config",
        config("paper.toml").to_str().unwrap(),
        "--plan",
        "F,LoRA8,LoRA8",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(csv).unwrap();
    let all = text.lines().find(|l| l.starts_with("all,")).unwrap();
    assert_eq!(all.split(',').nth(5), Some("1179648"));
}

#[test]
fn usage_errors_exit_2() {
    let paper = config("paper.toml");
    let p = paper.to_str().unwrap();
    assert_eq!(mile(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mile(&["count-params", "--config", p, "--plan", "F,LoRA0,F"]).status.code(), Some(2));
    assert_eq!(mile(&["count-params", "--config", p, "--plan", "Prefix,F,F"]).status.code(), Some(2));
    assert_eq!(mile(&["count-params", "--config", p, "--plan", "F,F"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nhidden_dim = 48\nbogus = 1\n").unwrap();
    let o = mile(&["count-params", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml:3: unknown field `bogus`"));
}

#[test]
fn runtime_errors_exit_1() {
    let o = mile(&["count-params", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = mile(&[
        "gen-instruct",
        "--in",
        "/nonexistent.jsonl",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_instruct_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy_instruct.jsonl");
    let input = fixture("toy_origin.jsonl");
    let args = ["gen-instruct", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1"];
    assert_eq!(mile(&args).status.code(), Some(0));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("toy_instruct.jsonl")).unwrap());
    let manifest = dir.path().join("toy_instruct.jsonl.manifest.json");
    assert_eq!(
        fs::read(manifest).unwrap(),
        fs::read(fixture("toy_instruct.jsonl.manifest.json")).unwrap()
    );
}

#[test]
fn gradcheck_single_plan() {
    let o = mile(&["gradcheck", "--plan", "LoRA2,IA3,PTv2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = config("toy.toml");
    let o = mile(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--plan",
        "F,LoRA2,LoRA2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,stage,lr,loss"));
    assert_eq!(csv.lines().count(), 1 + 4);

    let report = dir.path().join("eval.csv");
    let o = mile(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
        "--max-len",
        "4",
        "--threads",
        "2",
        "--csv",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(report).unwrap();
    assert!(text.starts_with("n_open,n_closed,acc_open,acc_closed,acc_global\n"));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let (n_open, n_closed): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
    assert_eq!(n_open + n_closed, 32);

    let o = mile(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
