//! Experiment configuration: one JSON document, optionally patched by
//! `--set path=value`, validated strictly (unknown keys are schema errors).

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context as _};
use imjet::models::{RdsParams, SellParams};
use imjet::parasolve::SolverConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// The published JSON schema of [`ExperimentConfig`].
pub const SCHEMA: &str = include_str!("../config.schema.json");

/// Names of the runnable tasks, in their canonical order.
pub const TASKS: [&str; 9] =
    ["gap-audit", "build-im", "jets", "compat-check", "extend", "track", "sell-demo", "rds-demo", "report"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub ladder: LadderConfig,
    pub solver: SolverBlock,
    pub tasks: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Level-1 base points used by `build-im`, `jets` and `compat-check`;
    /// a model-specific default set when absent.
    pub points: Option<Vec<Vec<f64>>>,
    pub jets: JetsConfig,
    pub compat: CompatConfig,
    pub extend: ExtendConfig,
    pub track: TrackConfig,
    pub sell_demo: SellDemoConfig,
    pub rds_demo: RdsDemoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            ladder: LadderConfig::default(),
            solver: SolverBlock::default(),
            tasks: Vec::new(),
            output_dir: PathBuf::from("imjet-out"),
            seed: 0,
            points: None,
            jets: JetsConfig::default(),
            compat: CompatConfig::default(),
            extend: ExtendConfig::default(),
            track: TrackConfig::default(),
            sell_demo: SellDemoConfig::default(),
            rds_demo: RdsDemoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Sell,
    Rds,
}

/// Model block: a name plus a parameter block whose shape depends on it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub name: ModelName,
    pub params: Value,
    /// Initial data for the reaction–diffusion model.
    pub initial: InitialData,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: ModelName::Rds, params: Value::Object(Map::new()), initial: InitialData::default() }
    }
}

impl ModelConfig {
    pub fn sell_params(&self) -> anyhow::Result<SellParams> {
        strict(&self.params).context("model.params (sell)")
    }

    pub fn rds_params(&self) -> anyhow::Result<RdsParams> {
        strict(&self.params).context("model.params (rds)")
    }
}

/// Sine coefficients, given directly or as a named profile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    Profile { name: String, amplitude: f64 },
    Coefficients { values: Vec<f64> },
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::Profile { name: "decaying".into(), amplitude: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThetaPolicy {
    /// Window midpoints, shrunk as needed for the exponent chain.
    Midpoint,
    /// Explicit exponents, one per level, checked against the windows.
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LadderConfig {
    /// Overrides the model's certified Lipschitz constant.
    pub lipschitz: Option<f64>,
    pub levels: usize,
    pub epsilon: f64,
    pub theta: ThetaPolicy,
    /// Required ratio `K / N_n` of the Galerkin truncation to the top
    /// ladder dimension (reaction–diffusion only).
    pub truncation_factor: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            lipschitz: None,
            levels: 1,
            epsilon: imjet::spectral::DEFAULT_EPSILON,
            theta: ThetaPolicy::Midpoint,
            truncation_factor: imjet::spectral::DEFAULT_TRUNCATION_FACTOR,
        }
    }
}

/// Solver numerics plus the trajectory cache location.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SolverBlock {
    /// Half-line length `T`; derived from the tolerance when absent.
    pub horizon: Option<f64>,
    /// Time step `Δt`; `dt_factor / λ_K` when absent.
    pub dt: Option<f64>,
    pub dt_factor: f64,
    pub tolerance: f64,
    pub fixed_point_tol: f64,
    pub max_iterations: usize,
    pub anderson_depth: usize,
    pub anderson_threshold: f64,
    pub max_decay_exponent: f64,
    /// Trajectory cache; `<output_dir>/cache` when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            horizon: d.horizon,
            dt: d.dt,
            dt_factor: d.dt_factor,
            tolerance: d.tolerance,
            fixed_point_tol: d.fixed_point_tol,
            max_iterations: d.max_iterations,
            anderson_depth: d.anderson_depth,
            anderson_threshold: d.anderson_threshold,
            max_decay_exponent: d.max_decay_exponent,
            cache_dir: None,
        }
    }
}

impl SolverBlock {
    pub fn numerics(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            fixed_point_tol: self.fixed_point_tol,
            max_iterations: self.max_iterations,
            anderson_depth: self.anderson_depth,
            anderson_threshold: self.anderson_threshold,
            dt_factor: self.dt_factor,
            max_decay_exponent: self.max_decay_exponent,
            horizon: self.horizon,
            dt: self.dt,
        }
    }
}

/// Log-spaced scales `from … to` (`count` values).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Scales {
    pub from: f64,
    pub to: f64,
    pub count: usize,
}

impl Scales {
    pub fn values(&self) -> Vec<f64> {
        let (a, b) = (self.from.ln(), self.to.ln());
        let n = self.count.max(2);
        (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct JetsConfig {
    pub order: usize,
    /// Direction of the prediction scan in the level-1 base (`e₁` when absent).
    pub direction: Option<Vec<f64>>,
    pub scales: Scales,
    /// Randomized jet-calculus self-check instances.
    pub self_check: usize,
}

impl Default for JetsConfig {
    fn default() -> Self {
        Self { order: 2, direction: None, scales: Scales { from: 1e-3, to: 1e-1, count: 10 }, self_check: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CompatConfig {
    pub order: usize,
    /// Anchor in the level-1 base (the first configured point when absent).
    pub anchor: Option<Vec<f64>>,
    pub direction: Option<Vec<f64>>,
    /// Probe direction in the top base (`(1, 0.4, 0.2, …)` when absent).
    pub probe: Option<Vec<f64>>,
    pub scales: Scales,
    /// Allowed shortfall below `order + α` (0.15 at order 2, 0.2 above).
    pub slack: Option<f64>,
}

impl Default for CompatConfig {
    fn default() -> Self {
        Self { order: 2, anchor: None, direction: None, probe: None, scales: Scales { from: 1e-3, to: 6e-2, count: 12 }, slack: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtendConfig {
    /// Tube widths of the ν-sweep, largest first.
    pub nus: Vec<f64>,
    pub order: usize,
    /// Box of level-1 coordinates covered by jet sites.
    pub lower: f64,
    pub upper: f64,
    /// Level-1 coordinates of the closeness probes (first coordinate; the
    /// others are zero).
    pub probe_bases: Vec<f64>,
    /// Offsets along the first normal direction of the top base.
    pub offsets: Vec<f64>,
    /// Start of the modified-flow invariance run (level-1 coordinate).
    pub flow_start: f64,
    pub flow_horizon: f64,
    pub flow_dt: f64,
    pub max_sites: usize,
}

impl Default for ExtendConfig {
    fn default() -> Self {
        Self {
            nus: vec![0.1, 0.05, 0.025],
            order: 2,
            lower: 0.0,
            upper: 0.18,
            probe_bases: vec![0.1, 0.12, 0.14, 0.16],
            offsets: vec![-0.12, -0.06, -0.03, -0.015, 0.0, 0.015, 0.03, 0.06, 0.12],
            flow_start: 0.15,
            flow_horizon: 10.0,
            flow_dt: 0.01,
            max_sites: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrackConfig {
    pub runs: usize,
    /// Amplitude of the random perturbation of the initial data.
    pub perturbation: f64,
    /// Required fraction of `θ` (0.95 on the full problem, 0.9 on the
    /// extended inertial form when absent).
    pub rate_factor: Option<f64>,
    pub options: imjet::perron::TrackingOptions,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { runs: 10, perturbation: 0.5, rate_factor: None, options: Default::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SellDemoConfig {
    /// Components of the explicit solution checked against the ODE.
    pub components: usize,
    pub horizon: f64,
    /// Resonance pairs `(n, n+1)` certified.
    pub resonances: usize,
    /// Levels `n` of the divided-difference smoothness probe.
    pub probe_levels: usize,
    /// Base coordinate where the modified-cascade invariance run starts.
    pub base: f64,
}

impl Default for SellDemoConfig {
    fn default() -> Self {
        Self { components: 5, horizon: 5.0, resonances: 3, probe_levels: 2, base: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RdsDemoConfig {
    pub horizon: f64,
    /// Invariance run on the level-1 chart over this time.
    pub invariance_time: f64,
}

impl Default for RdsDemoConfig {
    fn default() -> Self {
        Self { horizon: 10.0, invariance_time: 1.0 }
    }
}

/// Deserialize `value` into `T`, rejecting keys that `T` does not know.
///
/// Round-trips through `T`'s serialized form: every key of the input must
/// reappear there.
pub fn strict<T: DeserializeOwned + Serialize>(value: &Value) -> anyhow::Result<T> {
    let parsed: T = serde_json::from_value(value.clone())?;
    let back = serde_json::to_value(&parsed)?;
    unknown_keys(value, &back, "")?;
    Ok(parsed)
}

fn unknown_keys(input: &Value, known: &Value, path: &str) -> anyhow::Result<()> {
    match (input, known) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get(k) {
                    Some(w) => unknown_keys(v, w, &here)?,
                    None => bail!("unknown field `{here}`"),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (v, w)) in a.iter().zip(b).enumerate() {
                unknown_keys(v, w, &format!("{path}[{i}]"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Apply one `path=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise; only scalars are accepted.
pub fn apply_override(doc: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not of the form path=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if value.is_object() || value.is_array() {
        bail!("override `{path}` must be a scalar");
    }
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override path `{path}`");
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| anyhow!("`{part}` in `{path}` is not an array index"))?;
                items.get_mut(idx).ok_or_else(|| anyhow!("index {idx} out of range in `{path}`"))?
            }
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), Value::Null);
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just set").entry(part.to_string()).or_insert_with(|| {
                    if last {
                        Value::Null
                    } else {
                        Value::Object(Map::new())
                    }
                })
            }
            _ => bail!("`{path}` descends into a scalar"),
        };
    }
    *node = value;
    Ok(())
}

/// Load, patch and validate a configuration.
pub fn load(text: Option<&str>, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let mut doc: Value = match text {
        Some(t) => serde_json::from_str(t).context("config is not valid JSON")?,
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        bail!("config must be a JSON object");
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = strict(&doc)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        match self.model.name {
            ModelName::Sell => {
                self.model.sell_params()?;
            }
            ModelName::Rds => {
                self.model.rds_params()?;
            }
        }
        for t in &self.tasks {
            if !TASKS.contains(&t.as_str()) {
                bail!("unknown task `{t}` (known: {})", TASKS.join(", "));
            }
        }
        if self.ladder.levels == 0 {
            bail!("ladder.levels must be at least 1");
        }
        if let ThetaPolicy::Explicit { values } = &self.ladder.theta {
            if values.len() != self.ladder.levels {
                bail!("ladder.theta.values needs {} entries", self.ladder.levels);
            }
        }
        if !(self.ladder.epsilon > 0.0 && self.ladder.epsilon < 1.0) {
            bail!("ladder.epsilon must lie in (0, 1)");
        }
        if !(self.ladder.truncation_factor >= 1.0) {
            bail!("ladder.truncation_factor must be at least 1");
        }
        let positive = [
            ("solver.tolerance", self.solver.tolerance),
            ("solver.fixed_point_tol", self.solver.fixed_point_tol),
            ("solver.dt_factor", self.solver.dt_factor),
            ("extend.flow_horizon", self.extend.flow_horizon),
            ("extend.flow_dt", self.extend.flow_dt),
            ("sell_demo.horizon", self.sell_demo.horizon),
            ("rds_demo.horizon", self.rds_demo.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive");
            }
        }
        if self.extend.nus.is_empty() || self.extend.nus.iter().any(|v| !(*v > 0.0)) {
            bail!("extend.nus must be a non-empty list of positive widths");
        }
        if !(self.extend.upper > self.extend.lower) {
            bail!("extend.upper must exceed extend.lower");
        }
        for (name, s) in [("jets.scales", self.jets.scales), ("compat.scales", self.compat.scales)] {
            if !(s.from > 0.0 && s.to > s.from && s.count >= 2) {
                bail!("{name} needs 0 < from < to and count ≥ 2");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration,
    /// excluding where the outputs go.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
            m.remove("tasks");
            if let Some(Value::Object(s)) = m.get_mut("solver") {
                s.remove("cache_dir");
            }
        }
        hex(&Sha256::digest(canonical(&v).as_bytes()))
    }
}

/// JSON with object keys sorted, so equal values hash equally.
pub fn canonical(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(v)).expect("value serializes")
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
