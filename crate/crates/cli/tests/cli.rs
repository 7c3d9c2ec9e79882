use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
master_seed = 11
[env]
task_kind = "modular_arithmetic"
difficulty = 5
n_train = 24
n_eval = 12
[policy]
backend = "tabular"
[offline]
epochs = 5
[online]
T = 3
S = 2
prompt_batch = 8
rollouts_per_prompt = 2
B = 8
[baseline.grpo]
rounds = 3
prompt_batch = 8
[eval]
seeds = [0]
targets = ["offline", "bootstrap", "sft"]
[verify]
policies = 50
"#;

fn fcp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcp"))
        .current_dir(dir)
        .env("FCP_OUTPUT_DIR", dir.join("out"))
        .env("RUST_LOG", "warn")
        .args(["-c", "tiny.toml"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fcp(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn pipeline(dir: &Path) {
    for stage in ["gen-tasks", "collect", "train-offline", "build-pool", "bootstrap"] {
        ok(dir, &[stage]);
    }
    ok(dir, &["train-baseline", "--method", "sft"]);
    ok(dir, &["train-baseline", "--method", "grpo_lite"]);
    ok(dir, &["eval"]);
    ok(dir, &["report"]);
}

#[test]
fn full_pipeline_writes_manifests() {
    let dir = setup();
    pipeline(dir.path());
    let out = dir.path().join("out");
    assert!(out.join("config.resolved.toml").exists());
    for stage in ["tasks", "collect", "train-offline", "build-pool", "bootstrap", "train-baseline", "eval", "report"] {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(stage).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["stage"], stage);
        assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
        assert!(!m["artifacts"].as_object().unwrap().is_empty(), "{stage}");
    }
    let csv = fs::read_to_string(out.join("report/dynamics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("method,round,accuracy"));
    assert!(csv.lines().any(|l| l.starts_with("grpo_lite,3,")));
    let sweep = fs::read_to_string(out.join("eval/offline/records.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 5);
}

#[test]
fn missing_upstream_is_a_config_error() {
    let dir = setup();
    let out = fcp(dir.path(), &["collect"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tasks/train.jsonl"));
    ok(dir.path(), &["gen-tasks"]);
    ok(dir.path(), &["collect"]);
    let out = fcp(dir.path(), &["train-baseline", "--method", "grpo_lite"]);
    assert_eq!(out.status.code(), Some(2), "grpo_lite needs the sft checkpoint");
}

#[test]
fn unknown_keys_get_suggestions() {
    let dir = setup();
    let out = fcp(dir.path(), &["-s", "onlien.T=4", "gen-tasks"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did you mean `online`"));
    let out = fcp(dir.path(), &["-s", "online.rouds=4", "gen-tasks"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fcp(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_artifact_exits_one() {
    let dir = setup();
    ok(dir.path(), &["gen-tasks"]);
    ok(dir.path(), &["collect"]);
    fs::write(dir.path().join("out/collect/offline.jsonl"), "{\"x\": 3}\n").unwrap();
    let out = fcp(dir.path(), &["train-offline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn cft_is_not_an_eval_target() {
    let dir = setup();
    ok(dir.path(), &["gen-tasks"]);
    let out = fcp(dir.path(), &["-s", "eval.targets=[\"cft\"]", "eval"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_prints_json() {
    let dir = setup();
    let out = ok(dir.path(), &["--json", "verify"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["instances"][0]["bayes_residual"].as_f64().unwrap() < 1e-12);
}

fn read_all(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn consecutive_runs_are_byte_identical() {
    let dir = setup();
    let out = dir.path().join("out");
    pipeline(dir.path());
    let first = read_all(&out);
    fs::remove_dir_all(&out).unwrap();
    pipeline(dir.path());
    let second = read_all(&out);
    assert_eq!(first.len(), second.len());
    for ((na, da), (nb, db)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = setup();
    for stage in ["gen-tasks", "collect", "train-offline", "build-pool", "bootstrap"] {
        ok(dir.path(), &[stage]);
    }
    let boot = dir.path().join("out/bootstrap");
    let full = read_all(&boot);
    fs::remove_file(boot.join("checkpoint-003.json")).unwrap();
    fs::remove_file(boot.join("checkpoint-002.json")).unwrap();
    ok(dir.path(), &["bootstrap", "--resume"]);
    assert_eq!(read_all(&boot), full);
}
