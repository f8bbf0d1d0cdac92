//! Task execution, artifact layout, the output-directory lock and the
//! aggregate report.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::context::{Context, Failure, TaskResult};
use crate::output::{Check, TaskOutput};
use crate::{demos, extension, pipelines};

pub const LOCK_FILE: &str = ".imjet.lock";

/// Task-level overrides that come from subcommand flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskFlags {
    pub order: Option<usize>,
}

/// Exclusive ownership of the output directory for the duration of a run.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> TaskResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::Schema(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Schema(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Schema(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    task: String,
    status: &'static str,
    exit_code: i32,
    artifacts: Vec<String>,
    started_unix: f64,
    elapsed_seconds: f64,
    runtime: Value,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_json(path: &Path, v: &impl Serialize) -> TaskResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Failure::Solver(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn dispatch(ctx: &Context, task: &str, flags: TaskFlags) -> TaskResult<TaskOutput> {
    match task {
        "gap-audit" => pipelines::gap_audit(ctx),
        "build-im" => pipelines::build_im(ctx),
        "jets" => pipelines::jets(ctx, flags.order.unwrap_or(ctx.cfg.jets.order)),
        "compat-check" => pipelines::compat_check(ctx, flags.order.unwrap_or(ctx.cfg.compat.order)),
        "extend" => extension::extend(ctx),
        "track" => extension::track(ctx),
        "sell-demo" => demos::sell_demo(ctx),
        "rds-demo" => demos::rds_demo(ctx),
        "report" => summarize(ctx),
        other => Err(Failure::Schema(format!("unknown task `{other}`"))),
    }
}

/// Run `tasks` in order. Gate failures do not stop the run; errors do.
/// Returns the process exit code.
pub fn run(ctx: &Context, tasks: &[String], flags: TaskFlags) -> i32 {
    let _lock = match OutputLock::acquire(&ctx.out) {
        Ok(l) => l,
        Err(f) => {
            eprintln!("{}", error_json(&f, None));
            return f.exit_code();
        }
    };
    let run_started = unix_now();
    let mut entries = Vec::new();
    let mut code = 0;
    for task in tasks {
        let started = unix_now();
        let clock = Instant::now();
        let mut runtime = Value::Null;
        let (status, exit_code, artifacts) = match dispatch(ctx, task, flags) {
            Ok(out) => match persist(ctx, task, &out) {
                Ok(files) => {
                    runtime = out.runtime.clone();
                    let pass = out.passed();
                    for c in out.checks.iter().filter(|c| !c.pass) {
                        eprintln!("{task}: gate failed: {} = {:e} (needs {} {:e})", c.name, c.value, c.relation, c.threshold);
                    }
                    (if pass { "pass" } else { "fail" }, if pass { 0 } else { 1 }, files)
                }
                Err(f) => ("error", f.exit_code(), error_report(ctx, task, &f)),
            },
            Err(f) => ("error", f.exit_code(), error_report(ctx, task, &f)),
        };
        eprintln!("{task}: {status}");
        entries.push(ManifestEntry {
            task: task.clone(),
            status,
            exit_code,
            artifacts,
            started_unix: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
            runtime,
        });
        if status == "error" {
            code = exit_code;
            break;
        }
        if exit_code != 0 {
            code = 1;
        }
    }
    let manifest = json!({
        "version": imjet::VERSION,
        "config_hash": ctx.hash,
        "config": ctx.cfg,
        "seed": ctx.cfg.seed,
        "started_unix": run_started,
        "finished_unix": unix_now(),
        "exit_code": code,
        "tasks": entries,
    });
    if let Err(f) = write_json(&ctx.out.join("manifest.json"), &manifest) {
        eprintln!("{}", error_json(&f, None));
        return f.exit_code();
    }
    code
}

fn header(ctx: &Context, task: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("task".into(), json!(task));
    m.insert("version".into(), json!(imjet::VERSION));
    m.insert("config_hash".into(), json!(ctx.hash));
    m.insert("seed".into(), json!(ctx.cfg.seed));
    m
}

fn persist(ctx: &Context, task: &str, out: &TaskOutput) -> TaskResult<Vec<String>> {
    let mut files = Vec::new();
    let mut report = header(ctx, task);
    report.insert("status".into(), json!(if out.passed() { "pass" } else { "fail" }));
    report.insert("checks".into(), serde_json::to_value(&out.checks).map_err(|e| Failure::Solver(e.to_string()))?);
    report.insert("results".into(), out.results.clone());
    let name = format!("{task}.report.json");
    write_json(&ctx.out.join(&name), &report)?;
    files.push(name);
    for t in &out.tables {
        let name = format!("{task}.{}.csv", t.name);
        let mut bytes = format!("# config_hash={} version={}\n", ctx.hash, imjet::VERSION).into_bytes();
        bytes.extend(t.to_csv()?);
        fs::write(ctx.out.join(&name), bytes)?;
        files.push(name);
    }
    for (rel, bytes) in &out.files {
        let path = ctx.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut data = Vec::new();
        if rel.ends_with(".csv") {
            data.extend(format!("# config_hash={} version={}\n", ctx.hash, imjet::VERSION).into_bytes());
        }
        data.extend(bytes);
        fs::write(&path, data)?;
        files.push(rel.clone());
    }
    Ok(files)
}

fn error_json(f: &Failure, task: Option<&str>) -> Value {
    json!({ "error": { "kind": f.kind(), "exit_code": f.exit_code(), "message": f.message(), "task": task } })
}

/// Machine-readable error report for a failed task.
fn error_report(ctx: &Context, task: &str, f: &Failure) -> Vec<String> {
    eprintln!("{task}: {f}");
    let mut report = header(ctx, task);
    report.insert("status".into(), json!("error"));
    report.insert("error".into(), error_json(f, Some(task))["error"].clone());
    let name = format!("{task}.report.json");
    match write_json(&ctx.out.join(&name), &report) {
        Ok(()) => vec![name],
        Err(_) => vec![],
    }
}

/// Write an error report when no run could start (bad config).
pub fn report_config_error(out: Option<&Path>, f: &Failure) {
    eprintln!("{}", error_json(f, None));
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = write_json(&dir.join("error.json"), &error_json(f, None));
        }
    }
}

const CRITERIA: [(u8, &str); 10] = [
    (1, "Green-operator norm"),
    (2, "Perron contraction"),
    (3, "jet calculus exactness"),
    (4, "chart derivative consistency"),
    (5, "order-n jet prediction"),
    (6, "compatibility scaling"),
    (7, "exponential tracking"),
    (8, "extension anchoring and closeness"),
    (9, "modified-nonlinearity invariance"),
    (10, "Sell closed forms"),
];

/// Aggregate every `*.report.json` in the output directory into one
/// pass/fail line per acceptance criterion.
fn summarize(ctx: &Context) -> TaskResult<TaskOutput> {
    let mut names: Vec<String> = fs::read_dir(&ctx.out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".report.json") && n != "report.report.json")
        .collect();
    names.sort();
    let mut by_criterion: BTreeMap<u8, Vec<Value>> = BTreeMap::new();
    let mut sources = Vec::new();
    for name in &names {
        let doc: Value = serde_json::from_slice(&fs::read(ctx.out.join(name))?)
            .map_err(|e| Failure::Schema(format!("{name}: {e}")))?;
        let same = doc["config_hash"].as_str() == Some(ctx.hash.as_str());
        sources.push(json!({ "file": name, "status": doc["status"], "config_hash_matches": same }));
        for c in doc["checks"].as_array().into_iter().flatten() {
            if let Some(id) = c["criterion"].as_u64() {
                by_criterion.entry(id as u8).or_default().push(json!({ "source": name, "check": c }));
            }
        }
    }
    let mut criteria = Vec::new();
    let mut checks = Vec::new();
    for (id, title) in CRITERIA {
        let evidence = by_criterion.remove(&id).unwrap_or_default();
        let status = if evidence.is_empty() {
            "not-run"
        } else if evidence.iter().all(|e| e["check"]["pass"].as_bool() == Some(true)) {
            "pass"
        } else {
            "fail"
        };
        if status != "not-run" {
            checks.push(Check::holds(Some(id), title, status == "pass"));
        }
        criteria.push(json!({ "criterion": id, "title": title, "status": status, "evidence": evidence }));
    }
    Ok(TaskOutput { results: json!({ "sources": sources, "criteria": criteria }), checks, ..Default::default() })
}
