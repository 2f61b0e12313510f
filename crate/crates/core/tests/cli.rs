use std::path::Path;
use std::process::{Command, Output};

use consmooth::certify::read_records_csv;
use consmooth::io::{Checkpoint, Stage};

fn consmooth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consmooth")).args(args).output().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {text:?}");
    lines[0].to_string()
}

const SMALL: &str = "\
[model]
depth = 1
width = 16
heads = 2
mlp_hidden = 32
time_features = 8
projector_hidden = 32
projector_out = 16
[pretrain]
batch_size = 16
[data]
train_per_class = 10
test_per_class = 3
certify_count = 6
";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pretrain_with_zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = consmooth(&["--config", &cfg, "--out", out.to_str().unwrap(), "pretrain", "--iters", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&out.join("pretrain.ckpt")).unwrap();
    assert_eq!((ck.stage, ck.progress), (Stage::Pretrain, 0));
    assert_eq!(std::fs::read(out.join("pretrain_metrics.jsonl")).unwrap(), b"");
}

#[test]
fn evaluate_rejects_empty_records() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = consmooth(&["--out", dir.path().to_str().unwrap(), "evaluate", "--records", empty.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error: kind="));

    let header_only = dir.path().join("header.csv");
    std::fs::write(&header_only, "sample_id,label,predicted,abstain,pA_lower,radius,ms\n").unwrap();
    let o = consmooth(&["--out", dir.path().to_str().unwrap(), "evaluate", "--records", header_only.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).contains("holds no records"));
}

#[test]
fn unknown_config_keys_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[certify]\nsamples = 3\n");
    let o = consmooth(&["--config", &cfg, "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error: kind=config msg=\""));
}

#[test]
fn usage_errors_exit_two() {
    let o = consmooth(&["certify", "--sigma", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error: kind=usage"));
}

#[test]
fn halfspace_certify_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = consmooth(&[
        "--out", d, "certify", "--oracle", "halfspace", "--sigma", "0.5", "--n", "10000", "--count", "20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_records_csv(std::fs::File::open(dir.path().join("certify.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 20);
    let mean = records.iter().map(|r| r.radius).sum::<f64>() / 20.0;
    assert!((0.45..=0.5).contains(&mean), "{mean}");

    let csv = dir.path().join("certify.csv");
    let o = consmooth(&["--out", d, "evaluate", "--records", csv.to_str().unwrap(), "--sigmas", "0.5", "--n", "10000"]);
    assert!(o.status.success());
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("r,sigma=0.5\n0,1\n"), "{curve}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["records"], 20);
}

#[test]
fn gen_data_round_trips_through_file_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    let o = consmooth(&["--config", &cfg, "--out", data.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success());
    let text = SMALL.replace(
        "[data]\n",
        &format!(
            "[data]\nsource = \"file\"\ntrain_path = {:?}\ntest_path = {:?}\n",
            data.join("train.bin"),
            data.join("test.bin")
        ),
    );
    let p = dir.path().join("file.toml");
    std::fs::write(&p, text).unwrap();
    let again = dir.path().join("again");
    let o = consmooth(&["--config", p.to_str().unwrap(), "--out", again.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(data.join("train.bin")).unwrap(), std::fs::read(again.join("train.bin")).unwrap());
}

#[test]
fn finetune_requires_an_init_choice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = consmooth(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "finetune"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).contains("--init"));
}

#[test]
fn stage_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[finetune]\nepochs = 1\n");
    let d = dir.path().to_str().unwrap();
    assert!(consmooth(&["--config", &cfg, "--out", d, "pretrain", "--iters", "2"]).status.success());
    let pre = dir.path().join("pretrain.ckpt");
    let o = consmooth(&["--config", &cfg, "--out", d, "finetune", "--resume", pre.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).contains("expected Finetune"));
}
