use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protolab::harness::{Algo, PretrainChoice, RunConfig};

fn proto_lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proto-lab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(out: &str) -> RunConfig {
    let mut cfg = RunConfig::example(out);
    cfg.steps = 2_000;
    cfg.k_max = 20;
    cfg.seeds = vec![1, 2];
    cfg.dataset.size = 500;
    cfg
}

#[test]
fn gen_env_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = proto_lab(&["gen-env", "--spec", "gridworld:3x3", "--out", "env.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mdp = protolab::harness::load_mdp(&dir.path().join("env.json")).unwrap();
    assert_eq!((mdp.n_states(), mdp.n_actions()), (9, 4));
}

#[test]
fn missing_eta_exits_1_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&small_config("out").to_json()).unwrap();
    v.as_object_mut().unwrap().remove("eta");
    fs::write(dir.path().join("run.json"), v.to_string()).unwrap();
    let out = proto_lab(&["finetune", "--config", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_subcommand_and_flag_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = proto_lab(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = proto_lab(&["gen-env", "--spec", "gridworld:3x3", "--out", "e.json", "--fast"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_spec_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = proto_lab(&["gen-env", "--spec", "maze:3x3", "--out", "e.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = proto_lab(&["plot", "--dir", "."], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for f in ["learning_curves.csv", "deviation.csv", "bound_audit.csv"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn compare_writes_aggregates_and_scripts() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config("a");
    let mut b = a.clone();
    b.algo = Algo::Noreg;
    fs::write(dir.path().join("a.json"), a.to_json()).unwrap();
    fs::write(dir.path().join("b.json"), b.to_json()).unwrap();
    let out = proto_lab(&["compare", "--configs", "a.json", "b.json", "--out", "report"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = dir.path().join("report");
    for f in ["learning_curves.csv", "deviation.csv", "bound_audit.csv", "learning_curves.gp", "deviation_scatter.gp", "bound_audit.gp"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let curves = fs::read_to_string(report.join("learning_curves.csv")).unwrap();
    assert!(curves.contains("\nproto,") && curves.contains("\nnoreg,"));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn pipeline(dir: &Path) {
    let steps: [&[&str]; 4] = [
        &["gen-env", "--spec", "gridworld:3x3:noise=0.1", "--out", "env.json"],
        &["collect", "--env", "env.json", "--behavior", "serpentine:3x3:0.1", "--n", "2000", "--seed", "7", "--out", "data.txt"],
        &["pretrain", "--env", "env.json", "--data", "data.txt", "--method", "insample_fqi", "--out", "pre.json"],
        &["finetune", "--config", "run.json", "--data", "data.txt", "--pretrained", "pre.json"],
    ];
    let mut cfg = small_config("run");
    cfg.top_seed = 7;
    cfg.pretrain = PretrainChoice::InsampleFqi;
    fs::write(dir.join("run.json"), cfg.to_json()).unwrap();
    for args in steps {
        let out = proto_lab(args, dir);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = proto_lab(&["plot", "--dir", "run"], dir);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn full_pipeline_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() > 8);
    assert_eq!(sa, sb);
}

#[test]
fn worker_override_does_not_change_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, workers) in [(a.path(), "1"), (b.path(), "4")] {
        fs::write(dir.join("run.json"), small_config("run").to_json()).unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_proto-lab"))
            .args(["finetune", "--config", "run.json"])
            .current_dir(dir)
            .env("PROTO_LAB_WORKERS", workers)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(snapshot(&a.path().join("run")), snapshot(&b.path().join("run")));
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("run").to_json();
    fs::write(dir.path().join("run.json"), &cfg).unwrap();
    let out = proto_lab(&["iterate-exact", "--config", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = proto_lab(&["audit-bounds", "--config", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("run.json")).unwrap(), cfg);
    assert!(dir.path().join("run/exact_seed1.csv").is_file());
    assert!(dir.path().join("run/bound_audit.csv").is_file());
}
