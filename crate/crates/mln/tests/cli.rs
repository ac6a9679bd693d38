//! End-to-end runs of the `mln` binary: train, eval, inspect, and the
//! documented exit codes.

use std::fs;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_mln");

const SMOKE_CONFIG: &str = "\
# small synthetic run for CLI smoke tests
[dataset]
source = gaussian
dim = 8
sigma = 0.3

[model]
hidden = 16,8
init_seed = 4

[train]
episodes = 20
way = 5
queries = 3
seed = 9

[eval]
episodes = 5
way = 3
shots = 1
queries = 4
seed = 2
";

#[test]
fn train_eval_inspect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, SMOKE_CONFIG).unwrap();
    let ckpt = dir.path().join("model.ckpt");

    let out = Command::new(BIN)
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let metrics = fs::read_to_string(dir.path().join("model.ckpt.metrics.csv")).unwrap();
    assert!(metrics.starts_with("episode,loss,train_acc,lr"));
    assert_eq!(metrics.lines().count(), 21);

    let report = dir.path().join("report.csv");
    let out = Command::new(BIN)
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let report_text = fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("way,shots,episodes,mean_acc,ci95"));
    assert!(report_text.lines().nth(1).unwrap().starts_with("3,1,5,"));

    let out = Command::new(BIN)
        .args(["inspect", "--ckpt"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "inspect failed: {}", String::from_utf8_lossy(&out.stderr));
    let diag = String::from_utf8_lossy(&out.stdout);
    assert!(diag.contains("kind,i,j,value"));
    assert!(diag.contains("nulled_error_norm"));
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(&config, SMOKE_CONFIG).unwrap();

    let train = |name: &str, env_seed: Option<&str>| {
        let ckpt = dir.path().join(name);
        let mut cmd = Command::new(BIN);
        cmd.args(["train", "--config"]).arg(&config).arg("--out").arg(&ckpt);
        if let Some(s) = env_seed {
            cmd.env("MLN_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(&ckpt).unwrap()
    };
    let base = train("a.ckpt", None);
    let same = train("b.ckpt", None);
    let other = train("c.ckpt", Some("777"));
    assert_eq!(base, same);
    assert_ne!(base, other);
}

#[test]
fn exit_codes_match_contract() {
    // usage error -> 2
    let out = Command::new(BIN).arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // invalid config -> 2
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[train]\nway = banana\n").unwrap();
    let out = Command::new(BIN)
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // runtime failure (missing checkpoint) -> 1
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let out = Command::new(BIN)
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("missing.ckpt"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
