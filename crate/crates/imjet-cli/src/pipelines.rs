//! Spectral audit, manifold construction, jets and compatibility.

use std::path::PathBuf;

use imjet::jetcalc::{extract_components, multiset_count, Jet, SymMultiForm};
use imjet::jets_manifold::{compat_scan, prediction_scan, JetLadder};
use imjet::numerics::{loglog_fit, norm};
use imjet::parasolve::{operator_norm_estimate, FixedPointReport, WeightedTrajectory};
use imjet::perron::{export_chart_csv, invariance_defect, ManifoldChart};
use imjet::spectral::{check_holder_gap, first_gap_index};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{canonical, hex};
use crate::context::{Context, Failure, TaskResult};
use crate::output::{Check, Table, TaskOutput};

pub fn gap_audit(ctx: &Context) -> TaskResult<TaskOutput> {
    let prob = ctx.problem()?;
    let (op, l) = (&prob.op, prob.lipschitz);
    let mut table = Table::new("gaps", &["N", "lambda_N", "lambda_N1", "gap", "two_L", "admissible", "theta_lo", "theta_hi"]);
    for n in 1..op.dim() {
        let (lo, hi) = op.theta_window(n, l);
        let ok = op.gap(n) > 2.0 * l;
        table.push(vec![
            n as f64,
            op.eigenvalue(n),
            op.eigenvalue(n + 1),
            op.gap(n),
            2.0 * l,
            if ok { 1.0 } else { 0.0 },
            lo,
            hi,
        ]);
    }
    let first = first_gap_index(op, l);
    let ladder = ctx.ladder(0)?;
    let (n1, theta) = (ladder.dim(1), ladder.theta(1));
    let holder: Vec<_> = (1..=3)
        .map(|order| {
            let dims: Vec<usize> =
                (1..op.dim()).filter(|&n| check_holder_gap(op, n, l, order, ladder.epsilon)).collect();
            json!({ "order": order, "admissible_N": dims })
        })
        .collect();
    let est = operator_norm_estimate(op, n1, theta, 2, &ctx.solver())?;
    let rel = (est.estimate - est.formula).abs() / est.formula;
    Ok(TaskOutput {
        results: json!({
            "eigenvalues": op.eigenvalues(),
            "lipschitz": l,
            "first_gap_index": first,
            "N1": n1,
            "theta_window": op.theta_window(n1, l),
            "ladder": ladder,
            "holder_gap": holder,
            "green_norm": { "N": n1, "theta": theta, "estimate": est.estimate, "formula": est.formula,
                            "relative_error": rel, "iterations": est.iterations },
        }),
        checks: vec![Check::at_most(Some(1), "Green-operator norm relative error", rel, 0.02)],
        tables: vec![table],
        files: vec![],
        runtime: serde_json::Value::Null,
    })
}

/// Disk cache of backward trajectories, keyed by everything they depend on.
struct TrajectoryCache {
    dir: PathBuf,
    prefix: String,
}

impl TrajectoryCache {
    fn new(ctx: &Context) -> TaskResult<Self> {
        let ident = json!({
            "model": ctx.cfg.model,
            "lipschitz": ctx.cfg.ladder.lipschitz,
            "solver": ctx.solver(),
            "window": ctx.window()?,
        });
        Ok(Self { dir: ctx.cache_dir(), prefix: canonical(&ident) })
    }

    /// A trajectory depends on the ladder only through its chart's split
    /// and exponent, so charts of different ladders share entries.
    fn key(&self, chart: &ManifoldChart, p: &[f64]) -> String {
        let bits: Vec<String> = p.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        let level = format!("{}|{:016x}", chart.split(), chart.theta().to_bits());
        let digest = Sha256::digest(format!("{}|{level}|{}", self.prefix, bits.join(",")).as_bytes());
        hex(&digest[..16])
    }

    /// Seed the chart's memo from disk; true on a hit.
    fn load(&self, chart: &ManifoldChart, p: &[f64]) -> bool {
        let key = self.key(chart, p);
        let traj = WeightedTrajectory::read_cache(&self.dir.join(format!("{key}.traj")));
        let report = std::fs::read(self.dir.join(format!("{key}.json")))
            .ok()
            .and_then(|b| serde_json::from_slice::<FixedPointReport>(&b).ok());
        match (traj, report) {
            (Ok(t), Some(r)) => chart.preload(p, t, r).is_ok(),
            _ => false,
        }
    }

    fn store(&self, chart: &ManifoldChart, p: &[f64], traj: &WeightedTrajectory, report: &FixedPointReport) -> TaskResult<()> {
        std::fs::create_dir_all(&self.dir)?;
        let key = self.key(chart, p);
        traj.write_cache(&self.dir.join(format!("{key}.traj")))?;
        std::fs::write(self.dir.join(format!("{key}.json")), serde_json::to_vec(report).map_err(anyhow::Error::from)?)?;
        Ok(())
    }
}

fn fixed_point_summary(r: &FixedPointReport) -> serde_json::Value {
    json!({ "iterations": r.iterations, "contraction": r.contraction,
            "final_increment": r.final_increment, "anderson": r.anderson })
}

/// Base point of every level over a level-1 point: `P_{N_m}` of the lifted state.
fn level_points(jl: &JetLadder, p: &[f64]) -> TaskResult<Vec<Vec<f64>>> {
    let base = jl.base_point(p)?;
    Ok((1..=jl.levels()).map(|m| base.projected(jl.ladder().dim(m))).collect())
}

fn logspace(from: f64, to: f64, n: usize) -> Vec<f64> {
    crate::config::Scales { from, to, count: n }.values()
}

pub fn build_im(ctx: &Context) -> TaskResult<TaskOutput> {
    let jl = ctx.jet_ladder(0)?;
    let ladder = jl.ladder().clone();
    let cache = TrajectoryCache::new(ctx)?;
    let points = ctx.points(ladder.dim(1))?;
    let mut hits = 0usize;
    let mut charts = Vec::new();
    let mut level1_contraction = 0.0f64;
    for p in &points {
        // lifting to the higher bases solves level 1 first, so seed it before
        hits += usize::from(cache.load(jl.chart(1), p));
        let mut levels = Vec::new();
        for (m, q) in level_points(&jl, p)?.into_iter().enumerate() {
            let level = m + 1;
            let chart = jl.chart(level);
            if level > 1 && cache.load(chart, &q) {
                hits += 1;
            }
            let solved = chart.trajectory(&q)?;
            cache.store(chart, &q, &solved.0, &solved.1)?;
            if level == 1 {
                level1_contraction = level1_contraction.max(solved.1.contraction);
            }
            levels.push(json!({
                "level": level,
                "base": q,
                "value": solved.0.last()[chart.split()..].to_vec(),
                "fixed_point": fixed_point_summary(&solved.1),
            }));
        }
        charts.push(json!({ "point": p, "levels": levels }));
    }
    let prob = jl.problem();
    let n1 = ladder.dim(1);
    let bound = 2.0 * prob.lipschitz / prob.op.gap(n1) + 0.05;

    // first-order consistency of the chart derivative at the first point
    let eps = ladder.epsilon;
    let p0 = &points[0];
    let xi: Vec<f64> = (0..n1).map(|i| [1.0, 0.5, -0.5][i % 3]).collect();
    let unit = norm(&xi);
    let xi: Vec<f64> = xi.iter().map(|v| v / unit).collect();
    let chart = jl.chart(1);
    let m0 = chart.value(p0)?;
    let (_, d) = chart.derivative(p0, &xi)?;
    let hs = logspace(1e-3, 5e-2, 8);
    let mut remainders = Vec::new();
    for &h in &hs {
        let q: Vec<f64> = p0.iter().zip(&xi).map(|(a, b)| a + h * b).collect();
        let mq = chart.value(&q)?;
        let r: Vec<f64> = mq.iter().zip(&m0).zip(&d).map(|((a, b), c)| a - b - h * c).collect();
        remainders.push(norm(&r));
    }
    let slope = loglog_fit(&hs, &remainders).map(|f| f.0).unwrap_or(f64::NAN);
    let inv = invariance_defect(chart, p0, 1.0)?;

    let mut csv = Vec::new();
    export_chart_csv(chart, &points, &mut csv)?;
    let mut fd = Table::new("derivative", &["h", "remainder"]);
    for (h, r) in hs.iter().zip(&remainders) {
        fd.push(vec![*h, *r]);
    }
    Ok(TaskOutput {
        results: json!({
            "ladder": ladder,
            "charts": charts,
            "perron": { "observed_contraction": level1_contraction, "bound": bound },
            "derivative_check": { "point": p0, "direction": xi, "steps": hs, "remainders": remainders, "slope": slope },
            "invariance": inv,
        }),
        checks: vec![
            Check::at_most(Some(2), "level-1 Perron contraction", level1_contraction, bound),
            Check::at_least(Some(4), "chart derivative remainder slope", slope, 1.0 + eps - 0.1),
        ],
        tables: vec![fd],
        files: vec![("build-im.chart.csv".into(), csv)],
        runtime: json!({ "cache": { "dir": ctx.cache_dir(), "hits": hits } }),
    })
}

fn random_form(rng: &mut ChaCha8Rng, degree: usize, dim_in: usize, dim_out: usize) -> TaskResult<SymMultiForm> {
    let len = multiset_count(dim_in, degree) * dim_out;
    Ok(SymMultiForm::from_coeffs(degree, dim_in, dim_out, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())?)
}

/// Randomized round trips of the jet calculus: component extraction from
/// an evaluator, and polarization of a form's diagonal.
fn jet_self_check(ctx: &Context, instances: usize) -> TaskResult<(f64, f64)> {
    let (mut extraction, mut polarization) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let mut rng = ctx.rng("jets/self-check", i as u64);
        let order = rng.random_range(1..=4usize);
        let dim_in = rng.random_range(1..=3usize);
        let dim_out = rng.random_range(1..=3usize);
        let comps = (0..=order).map(|k| random_form(&mut rng, k, dim_in, dim_out)).collect::<TaskResult<Vec<_>>>()?;
        let jet = Jet::new(comps, true)?;
        let eval = |x: &[f64]| jet.eval(x).expect("shape checked");
        let back = extract_components(&eval, dim_in, dim_out, order)?;
        extraction = extraction.max(back.max_abs_diff(&jet)?);
        let form = jet.component(order);
        let args: Vec<Vec<f64>> = (0..order).map(|_| (0..dim_in).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = args.iter().map(|a| a.as_slice()).collect();
        let diag = |x: &[f64]| form.eval(x).expect("shape checked");
        let via_polarization = imjet::jetcalc::polarize(&diag, order, &refs)?;
        let direct = form.eval_multi(&refs)?;
        let err = via_polarization.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        polarization = polarization.max(err);
    }
    Ok((extraction, polarization))
}

fn unit_or_default(v: &Option<Vec<f64>>, dim: usize, default: &[f64], what: &str) -> TaskResult<Vec<f64>> {
    let d = match v {
        Some(d) => d.clone(),
        None => (0..dim).map(|i| default.get(i).copied().unwrap_or(0.0)).collect(),
    };
    if d.len() != dim || !(norm(&d) > 0.0) {
        return Err(Failure::Schema(format!("{what} must be a non-zero vector of dimension {dim}")));
    }
    Ok(d)
}

pub fn jets(ctx: &Context, order: usize) -> TaskResult<TaskOutput> {
    let jl = ctx.jet_ladder(order)?;
    let ladder = jl.ladder().clone();
    let cache = TrajectoryCache::new(ctx)?;
    let points = ctx.points(ladder.dim(1))?;
    let mut hits = 0usize;
    for p in &points {
        hits += usize::from(cache.load(jl.chart(1), p));
        for (m, q) in level_points(&jl, p)?.into_iter().enumerate().skip(1) {
            hits += usize::from(cache.load(jl.chart(m + 1), &q));
        }
    }
    let mut jets = Vec::new();
    for p in &points {
        let base = jl.base_point(p)?;
        let rep = jl.jet_with_report(&base, order)?;
        let comps: Vec<_> = rep.jet.components().iter().map(|c| c.coeffs().to_vec()).collect();
        jets.push(json!({ "point": p, "top_base": base.projected(jl.top_dim()), "components": comps,
                          "growth": rep.growth, "directions": rep.directions }));
    }
    let n1 = ladder.dim(1);
    let dir = unit_or_default(&ctx.cfg.jets.direction, n1, &[1.0], "jets.direction")?;
    let scales = ctx.cfg.jets.scales.values();
    let scan = prediction_scan(&jl, &points[0], &dir, &scales, order)?;
    let threshold = order as f64 + ladder.epsilon;
    let (extraction, polarization) = jet_self_check(ctx, ctx.cfg.jets.self_check)?;
    let mut table = Table::new("prediction", &["delta", "error"]);
    for (d, e) in scan.deltas.iter().zip(&scan.errors) {
        table.push(vec![*d, *e]);
    }
    let mut checks = vec![Check::at_least(Some(5), "jet prediction slope", scan.slope, threshold)];
    if ctx.cfg.jets.self_check > 0 {
        checks.push(Check::at_most(Some(3), "extraction round trip", extraction, 1e-10));
        checks.push(Check::at_most(Some(3), "polarization of the diagonal", polarization, 1e-10));
    }
    Ok(TaskOutput {
        results: json!({
            "order": order,
            "ladder": ladder,
            "jets": jets,
            "prediction": scan,
            "self_check": { "instances": ctx.cfg.jets.self_check, "extraction": extraction, "polarization": polarization },
        }),
        checks,
        tables: vec![table],
        files: vec![],
        runtime: json!({ "cache": { "dir": ctx.cache_dir(), "hits": hits } }),
    })
}

pub fn compat_check(ctx: &Context, order: usize) -> TaskResult<TaskOutput> {
    let jl = ctx.jet_ladder(order)?;
    let ladder = jl.ladder().clone();
    let n1 = ladder.dim(1);
    let top = jl.top_dim();
    let c = &ctx.cfg.compat;
    let anchor = match &c.anchor {
        Some(a) => a.clone(),
        None => ctx.points(n1)?.remove(0),
    };
    let dir = unit_or_default(&c.direction, n1, &[1.0], "compat.direction")?;
    let probe_default: Vec<f64> = (0..top).map(|i| if i == 0 { 1.0 } else { 0.8 * 0.5f64.powi(i as i32) }).collect();
    let probe = unit_or_default(&c.probe, top, &probe_default, "compat.probe")?;
    let slack = c.slack.unwrap_or(if order <= 2 { 0.15 } else { 0.2 });
    let threshold = order as f64 + ladder.epsilon - slack;
    let rep = compat_scan(&jl, &anchor, &dir, &probe, &c.scales.values(), order, threshold)?;
    let mut table = Table::new("pairs", &["delta", "xi", "radius", "residual"]);
    for p in &rep.pairs {
        table.push(vec![p.delta_norm, p.xi_norm, p.radius, p.residual]);
    }
    Ok(TaskOutput {
        results: json!({ "order": order, "ladder": ladder, "anchor": anchor, "direction": dir, "probe": probe,
                         "slope": rep.slope, "threshold": threshold, "degenerate": rep.degenerate, "pairs": rep.pairs }),
        checks: vec![Check::at_least(Some(6), "compatibility slope", rep.slope, threshold)],
        tables: vec![table],
        files: vec![],
        runtime: serde_json::Value::Null,
    })
}
