use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smixae::data::{write_shard, ActivationShard, LabelColumn, LabelValues};
use smixae::model::SmixaeConfig;
use smixae::train::tiny_run;

fn smixae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smixae"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_toy_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gen-toy", "--kind", "torus", "--count", "1000", "--ambient", "100", "--seed", "7", "--out", "t.smxa"];
    stdout(&smixae(&args, tmp.path()));
    let text = stdout(&smixae(&["inspect", "t.smxa"], tmp.path()));
    assert!(text.contains("n=100"), "{text}");
    assert!(text.contains("count=1000"), "{text}");
    assert!(text.contains("toroidal_angle (real)"), "{text}");
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("t.smxa.json")).unwrap()).unwrap();
    assert_eq!(sidecar["spec"]["ambient_dim"], 100);
}

/// 24 evenly represented hours placed on a circle in the first two of
/// eight coordinates, plus small noise everywhere.
fn hours_shard(path: &Path) {
    let m = 480;
    let n = 8;
    let mut rows = Vec::with_capacity(m * n);
    let mut hours = Vec::with_capacity(m);
    for i in 0..m {
        let h = (i % 24) as i64;
        let a = TAU * h as f64 / 24.0;
        for d in 0..n {
            let jitter = 0.01 * (((i * 31 + d * 17) % 13) as f64 - 6.0);
            let v = match d {
                0 => a.cos(),
                1 => a.sin(),
                _ => 0.0,
            };
            rows.push((v + jitter) as f32);
        }
        hours.push(h);
    }
    let shard = ActivationShard::new(
        n,
        rows,
        vec![LabelColumn {
            name: "hours".into(),
            values: LabelValues::Int(hours),
        }],
    )
    .unwrap();
    write_shard(&shard, path).unwrap();
}

#[test]
fn train_then_probe_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    hours_shard(&dir.join("hours.smxa"));
    let mut model = SmixaeConfig::full_scale(8);
    (model.j, model.k) = (16, 2);
    let mut run = tiny_run(model, 200, 32);
    run.checkpoint_every = 100;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run).unwrap()).unwrap();

    stdout(&smixae(&["train", "--config", "run.json", "--data", "hours.smxa", "--out", "ckpt"], dir));
    assert!(dir.join("ckpt/final.smxc").is_file());
    assert!(dir.join("ckpt/ckpt_00000100.smxc").is_file());
    let log = fs::read_to_string(dir.join("ckpt/train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.last().unwrap()["step"], 200);
    for key in ["step", "lr", "mse", "aux", "total", "frac_experts_fired_window", "t"] {
        assert!(records[0].get(key).is_some(), "log record lacks {key}");
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("ckpt/run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["batch_size"], 32);

    let args = [
        "probe", "--ckpt", "ckpt/final.smxc", "--task", "hours", "--hypothesis", "cyclic:24", "--regression",
        "linear", "--data", "hours.smxa", "--report", "r.json",
    ];
    stdout(&smixae(&args, dir));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    let r = &report["report"];
    assert!(r["top1"].as_f64().unwrap().is_finite());
    assert!(r["top5_mean"].as_f64().unwrap().is_finite());
    assert!(r["top1_expert"].as_u64().unwrap() < 16);
    assert_eq!(r["task"]["hypothesis"], "cyclic:24");
    assert_eq!(r["score_kind"], "r2");
    assert!(!r["experts"].as_array().unwrap().is_empty());
}

#[test]
fn preset_tiny_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    hours_shard(&dir.join("hours.smxa"));
    let out = stdout(&smixae(&["train", "--preset", "tiny", "--data", "hours.smxa", "--out", "ck", "--seed", "2"], dir));
    assert!(out.contains("trained 2000 steps"), "{out}");
    let text = stdout(&smixae(&["inspect", "ck/final.smxc"], dir));
    assert!(text.contains("n=8 j=32 p=16 b=3 k=4"), "{text}");
    assert!(text.contains("optimizer_step=2000"), "{text}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let help = smixae(&["--help"], dir);
    assert_eq!(help.status.code(), Some(0));
    let usage = smixae(&["train", "--bogus"], dir);
    assert_eq!(usage.status.code(), Some(1));
    assert!(!usage.stderr.is_empty());
    let bad_hypothesis = smixae(
        &["probe", "--ckpt", "x", "--data", "y", "--task", "h", "--hypothesis", "cyclic:1", "--report", "r.json"],
        dir,
    );
    assert_eq!(bad_hypothesis.status.code(), Some(1));
    let missing = smixae(&["inspect", "nope.smxa"], dir);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.smxa"));
}

#[test]
fn dimension_mismatch_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    hours_shard(&dir.join("hours.smxa"));
    let mut model = SmixaeConfig::full_scale(8);
    (model.j, model.k) = (4, 1);
    fs::write(dir.join("run.json"), serde_json::to_string(&tiny_run(model, 40, 16)).unwrap()).unwrap();
    stdout(&smixae(&["train", "--config", "run.json", "--data", "hours.smxa", "--out", "ck"], dir));
    stdout(&smixae(&["gen-toy", "--kind", "circle", "--count", "50", "--ambient", "5", "--out", "c.smxa"], dir));
    let out = smixae(&["eval", "--ckpt", "ck/final.smxc", "--data", "c.smxa", "--out", "e.json"], dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 7] = [
        ("train", &["--config", "--preset", "--data", "--out", "--seed", "--total-tokens", "--workers"]),
        ("eval", &["--ckpt", "--data", "--ce", "--out", "--batch-size"]),
        ("probe", &["--ckpt", "--data", "--task", "--hypothesis", "--regression", "--folds", "--seed", "--report"]),
        ("newline-probe", &["--ckpt", "--data", "--label", "--period", "--folds", "--seed", "--report"]),
        ("random-sample", &["--ckpt", "--data", "--out", "--label", "--max-points", "--min-activations", "--sample-size", "--seed"]),
        ("gen-toy", &["--kind", "--config", "--count", "--ambient", "--noise", "--seed", "--out"]),
        ("inspect", &["--workers"]),
    ];
    for (cmd, flags) in cases {
        let text = stdout(&smixae(&[cmd, "--help"], tmp.path()));
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}
