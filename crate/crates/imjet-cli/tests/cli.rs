//! End-to-end behaviour of the `imjet` binary: artifacts, exit codes,
//! determinism, locking and the trajectory cache.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SELL: &str = r#"{ "model": { "name": "sell" }, "ladder": { "levels": 2 } }"#;

fn imjet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imjet")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn out_dir(tmp: &TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn gap_audit_with_lipschitz_override_finds_first_gap() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "o");
    let run = imjet(&["gap-audit", "-o", &out, "--set", "model.params.diffusion=1", "--set", "ladder.lipschitz=3"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&Path::new(&out).join("gap-audit.report.json"));
    assert_eq!(report["task"], "gap-audit");
    assert_eq!(report["status"], "pass");
    let level = &report["results"]["ladder"]["levels"][0];
    assert_eq!(level["N"], 3);
    // eigenvalues k²: window (λ₃ + L, λ₄ − L) = (12, 13)
    assert_eq!(level["theta_window"][0].as_f64().unwrap(), 12.0);
    assert_eq!(level["theta_window"][1].as_f64().unwrap(), 13.0);
    let theta = level["theta"].as_f64().unwrap();
    assert!(theta > 12.0 && theta < 13.0);
    let csv = fs::read_to_string(Path::new(&out).join("gap-audit.gaps.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# config_hash=") && first.contains(report["config_hash"].as_str().unwrap()));
}

#[test]
fn identical_config_and_seed_give_identical_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SELL);
    let tasks = "gap-audit,build-im,jets,sell-demo";
    let (a, b, c) = (out_dir(&tmp, "a"), out_dir(&tmp, "b"), out_dir(&tmp, "c"));
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let run = imjet(&["run", "-c", &cfg, "-o", dir, "--seed", seed, "--tasks", tasks]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for task in tasks.split(',') {
        let name = format!("{task}.report.json");
        let left = fs::read(Path::new(&a).join(&name)).unwrap();
        assert_eq!(left, fs::read(Path::new(&b).join(&name)).unwrap(), "{name} differs between identical runs");
    }
    // the randomized jet self-check follows the seed
    let jets = |d: &str| read_json(&Path::new(d).join("jets.report.json"));
    assert_ne!(jets(&a)["config_hash"], jets(&c)["config_hash"]);
    assert_ne!(jets(&a)["results"]["self_check"], jets(&c)["results"]["self_check"]);
}

#[test]
fn unknown_config_key_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{ "ladder": { "levles": 2 } }"#);
    let out = out_dir(&tmp, "o");
    let run = imjet(&["gap-audit", "-c", &cfg, "-o", &out]);
    assert_eq!(code(&run), 2);
    let err = read_json(&Path::new(&out).join("error.json"));
    assert_eq!(err["error"]["exit_code"], 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("levles"));
    assert!(!Path::new(&out).join("manifest.json").exists());
}

#[test]
fn override_of_non_scalar_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let run = imjet(&["gap-audit", "-o", &out_dir(&tmp, "o"), "--set", "ladder={}"]);
    assert_eq!(code(&run), 2);
}

#[test]
fn infeasible_ladder_exits_with_its_own_code() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "o");
    // nine modes cannot host a second level for the cubic reaction
    let run = imjet(&["run", "-o", &out, "--set", "ladder.levels=2", "--tasks", "gap-audit,rds-demo"]);
    assert_eq!(code(&run), 3);
    let report = read_json(&Path::new(&out).join("gap-audit.report.json"));
    assert_eq!(report["status"], "error");
    assert_eq!(report["error"]["exit_code"], 3);
    let manifest = read_json(&Path::new(&out).join("manifest.json"));
    assert_eq!(manifest["exit_code"], 3);
    // the run stops at the first error
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 1);
    assert!(!Path::new(&out).join("rds-demo.report.json").exists());
}

#[test]
fn truncation_must_resolve_the_top_level() {
    let tmp = TempDir::new().unwrap();
    // a second level exists at N = 9, but sixteen modes are fewer than 2·9
    let short = imjet(&["gap-audit", "-o", &out_dir(&tmp, "a"), "--set", "ladder.levels=2", "--set", "model.params.modes=16"]);
    assert_eq!(code(&short), 3);
    let ok = imjet(&["gap-audit", "-o", &out_dir(&tmp, "b"), "--set", "ladder.levels=2", "--set", "model.params.modes=18"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let relaxed = imjet(&[
        "gap-audit", "-o", &out_dir(&tmp, "c"), "--set", "ladder.levels=2", "--set", "model.params.modes=16",
        "--set", "ladder.truncation_factor=1.5",
    ]);
    assert_eq!(code(&relaxed), 0);
}

#[test]
fn capability_mismatch_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SELL);
    let run = imjet(&["rds-demo", "-c", &cfg, "-o", &out_dir(&tmp, "o")]);
    assert_eq!(code(&run), 2);
}

#[test]
fn gate_failure_exits_one_and_the_run_continues() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "o");
    // demand a tracking rate above θ itself
    let run = imjet(&["run", "-o", &out, "--set", "track.rate_factor=1.5", "--set", "track.runs=2", "--tasks", "track,gap-audit"]);
    assert_eq!(code(&run), 1, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = read_json(&Path::new(&out).join("manifest.json"));
    let tasks = manifest["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 2);
    assert_eq!(tasks[0]["status"], "fail");
    assert_eq!(tasks[1]["status"], "pass");
    let track = read_json(&Path::new(&out).join("track.report.json"));
    assert_eq!(track["checks"][0]["criterion"], 7);
    assert_eq!(track["checks"][0]["pass"], false);
}

#[test]
fn empty_task_list_writes_only_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "o");
    let run = imjet(&["run", "-o", &out]);
    assert_eq!(code(&run), 0);
    let names: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec!["manifest.json".to_string()]);
    let manifest = read_json(&Path::new(&out).join("manifest.json"));
    assert_eq!(manifest["tasks"].as_array().unwrap().len(), 0);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "o");
    fs::create_dir_all(&out).unwrap();
    fs::write(Path::new(&out).join(".imjet.lock"), b"").unwrap();
    let run = imjet(&["gap-audit", "-o", &out]);
    assert_eq!(code(&run), 2);
    assert!(!Path::new(&out).join("gap-audit.report.json").exists());
    // a finished run releases its lock
    fs::remove_file(Path::new(&out).join(".imjet.lock")).unwrap();
    assert_eq!(code(&imjet(&["gap-audit", "-o", &out])), 0);
    assert!(!Path::new(&out).join(".imjet.lock").exists());
}

#[test]
fn jets_reuse_trajectories_cached_by_build_im() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SELL);
    let out = out_dir(&tmp, "o");
    let run = imjet(&["run", "-c", &cfg, "-o", &out, "--tasks", "build-im,jets"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = read_json(&Path::new(&out).join("manifest.json"));
    let hits = |i: usize| manifest["tasks"][i]["runtime"]["cache"]["hits"].as_u64().unwrap();
    assert_eq!(hits(0), 0);
    // three default points, two levels each
    assert_eq!(hits(1), 6);
    assert!(fs::read_dir(Path::new(&out).join("cache")).unwrap().count() >= 12);
}

#[test]
fn report_aggregates_criteria() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SELL);
    let out = out_dir(&tmp, "o");
    let run = imjet(&["run", "-c", &cfg, "-o", &out, "--tasks", "gap-audit,sell-demo,report"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&Path::new(&out).join("report.report.json"));
    let criteria = report["results"]["criteria"].as_array().unwrap();
    assert_eq!(criteria.len(), 10);
    let status = |id: usize| criteria[id - 1]["status"].as_str().unwrap().to_string();
    assert_eq!(status(1), "pass");
    assert_eq!(status(10), "pass");
    assert_eq!(status(7), "not-run");
}

#[test]
fn schema_subcommand_prints_the_schema() {
    let run = imjet(&["schema"]);
    assert_eq!(code(&run), 0);
    let schema: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(schema["additionalProperties"], false);
    assert!(schema["properties"]["ladder"].is_object());
}

#[test]
fn tracking_is_reproducible_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (out_dir(&tmp, "a"), out_dir(&tmp, "b"));
    for dir in [&a, &b] {
        let run = imjet(&["track", "-o", dir, "--seed", "7", "--set", "track.runs=3"]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for name in ["track.report.json", "track.rates.csv"] {
        assert_eq!(fs::read(Path::new(&a).join(name)).unwrap(), fs::read(Path::new(&b).join(name)).unwrap(), "{name}");
    }
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{ "model": { "name": "sell" }, "ladder": { "levels": 2 },
             "extend": { "nus": [0.1], "flow_horizon": 1.0 } }"#,
    );
    let out = out_dir(&tmp, "o");
    let run = imjet(&["run", "-c", &cfg, "-o", &out, "--tasks", "extend,sell-demo"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = read_json(&Path::new(&out).join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let version = manifest["version"].as_str().unwrap().to_string();
    let mut artifacts = Vec::new();
    for task in manifest["tasks"].as_array().unwrap() {
        artifacts.extend(task["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()));
    }
    assert!(artifacts.iter().any(|a| a.ends_with("samples.json")));
    for name in artifacts {
        let text = fs::read_to_string(Path::new(&out).join(&name)).unwrap();
        if name.ends_with(".csv") {
            let first = text.lines().next().unwrap();
            assert_eq!(first, format!("# config_hash={hash} version={version}"), "{name}");
        } else {
            let doc: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(doc["config_hash"], hash.as_str(), "{name}");
            assert_eq!(doc["version"], version.as_str(), "{name}");
        }
    }
}
