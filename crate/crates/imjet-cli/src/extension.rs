//! Extension sweeps, modified-flow invariance and exponential tracking.

use std::sync::Arc;

use imjet::extend::{closeness, modified_flow_invariance, ExtendedInertialForm, ExtendedManifold, ExtensionConfig};
use imjet::jets_manifold::JetLadder;
use imjet::numerics::{norm, sub};
use imjet::perron::tracking_solve;
use rand::Rng;
use serde_json::json;

use crate::context::{Context, Failure, TaskResult};
use crate::output::{Check, Table, TaskOutput};

/// Tensor grid of level-1 coordinates over `[lower, upper]^dim` with
/// spacing at most `ν/3`.
fn site_grid(ctx: &Context, dim: usize, nu: f64) -> TaskResult<Vec<Vec<f64>>> {
    let e = &ctx.cfg.extend;
    let per_axis = ((e.upper - e.lower) / (nu / 3.0)).ceil() as usize + 1;
    let total = (per_axis as f64).powi(dim as i32);
    if total > e.max_sites as f64 {
        return Err(Failure::Schema(format!(
            "ν = {nu} needs {total} jet sites in {dim} dimensions, above extend.max_sites = {}",
            e.max_sites
        )));
    }
    let axis: Vec<f64> = (0..per_axis).map(|i| e.lower + (e.upper - e.lower) * i as f64 / (per_axis - 1) as f64).collect();
    let mut pts = vec![Vec::new()];
    for _ in 0..dim {
        pts = pts.into_iter().flat_map(|p| axis.iter().map(move |a| [p.clone(), vec![*a]].concat())).collect();
    }
    Ok(pts)
}

fn build_extension(ctx: &Context, jl: Arc<JetLadder>, nu: f64) -> TaskResult<ExtendedManifold> {
    let coords = site_grid(ctx, jl.ladder().dim(1), nu)?;
    Ok(ExtendedManifold::build(jl, &coords, ExtensionConfig::new(nu, ctx.cfg.extend.order))?)
}

/// Level-1 point `(c, 0, …, 0)`.
fn on_axis(c: f64, dim: usize) -> Vec<f64> {
    (0..dim).map(|i| if i == 0 { c } else { 0.0 }).collect()
}

pub fn extend(ctx: &Context) -> TaskResult<TaskOutput> {
    let e = &ctx.cfg.extend;
    let jl = Arc::new(ctx.jet_ladder(e.order)?);
    let (n1, top) = (jl.ladder().dim(1), jl.top_dim());
    let mut probes = Vec::new();
    for &b in &e.probe_bases {
        let base = jl.base_point(&on_axis(b, n1))?.projected(top);
        if top > n1 {
            for &off in &e.offsets {
                let mut q = base.clone();
                q[n1] += off;
                probes.push(q);
            }
        } else {
            probes.push(base);
        }
    }
    let mut sweep = Vec::new();
    let mut table = Table::new("closeness", &["nu", "mu", "sites", "anchoring", "c0_gap", "c1_gap"]);
    let mut anchoring = 0.0f64;
    let mut files = Vec::new();
    let mut first: Option<ExtendedManifold> = None;
    for &nu in &e.nus {
        let ext = build_extension(ctx, jl.clone(), nu)?;
        let mut anchor = 0.0f64;
        for site in &ext.blend().sites {
            let level1 = jl.chart(1).value(&site.coords)?;
            let v = ext.eval(&site.point)?.value;
            anchor = anchor.max(norm(&sub(&v, &level1[top - n1..])));
        }
        anchoring = anchoring.max(anchor);
        let rep = closeness(&ext, &probes)?;
        let cfg = *ext.config();
        table.push(vec![nu, cfg.mu, ext.blend().sites.len() as f64, anchor, rep.c0_gap, rep.c1_gap]);
        sweep.push(json!({ "nu": nu, "mu": cfg.mu, "sites": ext.blend().sites.len(), "blend_radius": ext.blend().radius,
                           "anchoring": anchor, "c0_gap": rep.c0_gap, "c1_gap": rep.c1_gap }));
        // persisted bundle: sampled jets, extension parameters, provenance
        let dir = format!("extend.bundle.nu{nu}");
        let samples = json!({ "config_hash": ctx.hash, "version": imjet::VERSION, "sites": ext.blend().sites });
        files.push((format!("{dir}/samples.json"), serde_json::to_vec_pretty(&samples).map_err(anyhow::Error::from)?));
        let config = json!({ "config_hash": ctx.hash, "version": imjet::VERSION, "nu": cfg.nu, "mu": cfg.mu, "order": cfg.order, "blend_power": cfg.blend_power,
                             "blend_radius": ext.blend().radius, "fd_step": cfg.fd_step,
                             "kernel": "tensor (1 - s^2)^3 on |s| <= 1, Gauss-5 per axis" });
        files.push((format!("{dir}/config.json"), serde_json::to_vec_pretty(&config).map_err(anyhow::Error::from)?));
        let manifest = json!({ "config_hash": ctx.hash, "version": imjet::VERSION, "ladder": jl.ladder() });
        files.push((format!("{dir}/manifest.json"), serde_json::to_vec_pretty(&manifest).map_err(anyhow::Error::from)?));
        if first.is_none() {
            first = Some(ext);
        }
    }
    let ext = first.expect("nus is non-empty");
    let start = jl.base_point(&on_axis(e.flow_start, n1))?.projected(top);
    let (_, inv) = modified_flow_invariance(jl.problem(), &ext, &start, e.flow_horizon, e.flow_dt)?;
    let mut inv_table = Table::new("invariance", &["t", "defect"]);
    for (t, d) in inv.times.iter().zip(&inv.defects) {
        inv_table.push(vec![*t, *d]);
    }
    let c0: Vec<f64> = sweep.iter().map(|s| s["c0_gap"].as_f64().unwrap_or(f64::NAN)).collect();
    let c1: Vec<f64> = sweep.iter().map(|s| s["c1_gap"].as_f64().unwrap_or(f64::NAN)).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let mut checks = vec![Check::at_most(Some(8), "anchoring to the level-1 chart", anchoring, 1e-8)];
    if e.nus.len() >= 2 {
        checks.push(Check::holds(Some(8), "C0 gap decreases along the ν-sweep", decreasing(&c0)));
        checks.push(Check::holds(Some(8), "C1 gap decreases along the ν-sweep", decreasing(&c1)));
    }
    checks.push(Check::at_most(Some(9), "graph defect under the modified flow", inv.max_defect, 1e-6));
    Ok(TaskOutput {
        results: json!({
            "ladder": jl.ladder(),
            "probes": probes.len(),
            "sweep": sweep,
            "invariance": { "start": start, "horizon": e.flow_horizon, "dt": e.flow_dt, "max_defect": inv.max_defect },
        }),
        checks,
        tables: vec![table, inv_table],
        files,
        runtime: serde_json::Value::Null,
    })
}

pub fn track(ctx: &Context) -> TaskResult<TaskOutput> {
    let t = &ctx.cfg.track;
    let cfg = ctx.solver();
    let mut table = Table::new("rates", &["run", "rate", "constant", "theta"]);
    let mut runs = Vec::new();
    let (theta, factor, setting) = if ctx.is_sell() {
        // tracking toward the embedded level-1 manifold of the extended inertial form
        let jl = Arc::new(ctx.jet_ladder(2)?);
        let theta1 = jl.ladder().theta(1);
        let e = &ctx.cfg.extend;
        let ext = Arc::new(build_extension(ctx, jl.clone(), e.nus[0])?);
        let prob = ExtendedInertialForm::problem(ext)?;
        let (lo, hi) = (e.lower + 0.25 * (e.upper - e.lower), e.upper - 0.25 * (e.upper - e.lower));
        for i in 0..t.runs {
            let mut rng = ctx.rng("track", i as u64);
            let p = rng.random_range(lo..hi);
            let m = jl.chart(1).value(&[p])?;
            let mut u0 = vec![p];
            u0.extend(m.iter().take(prob.dim() - 1));
            u0[1] += t.perturbation * 0.1 * rng.random_range(-1.0..1.0);
            let (_, _, rep) = tracking_solve(&prob, 1, theta1, &u0, &cfg, &t.options)?;
            table.push(vec![i as f64, rep.fitted_rate, rep.constant, theta1]);
            runs.push(json!({ "initial": u0, "rate": rep.fitted_rate, "constant": rep.constant,
                              "degenerate": rep.degenerate, "iterations": rep.fixed_point.iterations }));
        }
        (theta1, t.rate_factor.unwrap_or(0.9), "extended inertial form, split 1")
    } else {
        let prob = ctx.problem()?;
        let ladder = ctx.ladder(1)?;
        let (n, theta) = (ladder.dim(1), ladder.theta(1));
        let base = ctx.initial_data(prob.dim())?;
        for i in 0..t.runs {
            let mut rng = ctx.rng("track", i as u64);
            let u0: Vec<f64> =
                base.iter().enumerate().map(|(k, b)| b + t.perturbation * rng.random_range(-1.0..1.0) / (k + 1) as f64).collect();
            let (_, _, rep) = tracking_solve(&prob, n, theta, &u0, &cfg, &t.options)?;
            table.push(vec![i as f64, rep.fitted_rate, rep.constant, theta]);
            runs.push(json!({ "initial": u0, "rate": rep.fitted_rate, "constant": rep.constant,
                              "degenerate": rep.degenerate, "iterations": rep.fixed_point.iterations }));
        }
        (theta, t.rate_factor.unwrap_or(0.95), "full problem, split N1")
    };
    let worst = table.rows.iter().map(|r| r[1]).fold(f64::INFINITY, f64::min);
    Ok(TaskOutput {
        results: json!({ "setting": setting, "theta": theta, "rate_factor": factor, "min_rate": worst, "runs": runs }),
        checks: vec![Check::at_least(Some(7), "minimum fitted tracking rate", worst, factor * theta)],
        tables: vec![table],
        files: vec![],
        runtime: serde_json::Value::Null,
    })
}
