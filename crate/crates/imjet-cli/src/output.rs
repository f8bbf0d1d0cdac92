//! What a task hands back to the runner: results, pass/fail checks and CSV
//! tables.

use serde::Serialize;
use serde_json::Value;

/// One pass/fail gate, optionally tied to an acceptance criterion.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub criterion: Option<u8>,
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(criterion: Option<u8>, name: &str, value: f64, threshold: f64) -> Self {
        Self { criterion, name: name.into(), value, relation: "<=", threshold, pass: value <= threshold }
    }

    pub fn at_least(criterion: Option<u8>, name: &str, value: f64, threshold: f64) -> Self {
        Self { criterion, name: name.into(), value, relation: ">=", threshold, pass: value >= threshold }
    }

    /// A yes/no property, recorded as value 1/0 against 1.
    pub fn holds(criterion: Option<u8>, name: &str, ok: bool) -> Self {
        Self { criterion, name: name.into(), value: if ok { 1.0 } else { 0.0 }, relation: "==", threshold: 1.0, pass: ok }
    }
}

/// A numeric table written as `<task>.<name>.csv`.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:e}")))?;
        }
        Ok(w.into_inner()?)
    }
}

/// Result of one task.
#[derive(Debug, Clone, Default)]
pub struct TaskOutput {
    pub results: Value,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    /// Raw files (relative path, bytes) written next to the report.
    pub files: Vec<(String, Vec<u8>)>,
    /// Run-state facts (cache hits, paths) that belong in the manifest,
    /// not in the reproducible report.
    pub runtime: Value,
}

impl TaskOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}
