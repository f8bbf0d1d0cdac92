//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! always printed. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 5 6`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use imjet::extend::{closeness, modified_flow_invariance, ExtendedInertialForm, ExtendedManifold, ExtensionConfig};
use imjet::jetcalc::{
    binomial_expand, compose_truncate, extract_components, multiset_count, polarize, Jet, SymMultiForm,
};
use imjet::jets_manifold::{compat_scan, prediction_scan, JetLadder};
use imjet::models::{
    rds_build, sell_c2_obstruction, sell_constants, sell_explicit, sell_smoothness_probe, RdsModel, RdsParams,
    SellModel, SellParams,
};
use imjet::numerics::{loglog_fit, norm, sub};
use imjet::parasolve::{operator_norm_estimate, SemilinearProblem, SolverConfig};
use imjet::perron::{backward_fixed_point, tracking_solve, ManifoldChart, TrackingOptions};
use imjet::spectral::{gap_ladder, SpectralOperator, DEFAULT_EPSILON};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sell(levels: usize, modes: usize, window: f64) -> Result<(SellModel, JetLadder), String> {
    let model = SellModel::new(SellParams { modes, window, ..Default::default() }).map_err(err)?;
    let prob = model.problem.clone();
    let ladder = gap_ladder(&prob.op, prob.lipschitz, levels, DEFAULT_EPSILON).map_err(err)?;
    let jl = JetLadder::new(prob, ladder, SolverConfig::default()).map_err(err)?.with_window(window);
    Ok((model, jl))
}

fn rds(diffusion: f64, modes: usize) -> Result<RdsModel, String> {
    rds_build(RdsParams { diffusion, modes, ..Default::default() }).map_err(err)
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

// ---------------------------------------------------------------------------

fn green_norm() -> Outcome {
    let cfg = SolverConfig::default();
    let squares = SpectralOperator::squares(1.0, 8).map_err(err)?;
    let dyadic = SpectralOperator::dyadic(7).map_err(err)?;
    let cases = [(&squares, 3, 12.5), (&dyadic, 3, 6.0), (&squares, 3, 14.8)];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (op, n, theta) in cases {
        let est = operator_norm_estimate(op, n, theta, 2, &cfg).map_err(err)?;
        // independent closed form
        let want = 1.0 / (theta - op.eigenvalue(n)).min(op.eigenvalue(n + 1) - theta);
        let rel = (est.estimate - want).abs() / want;
        worst = worst.max(rel);
        parts.push(format!("{:.4}/{:.4}", est.estimate, want));
    }
    Ok((worst <= 0.02, format!("worst relative error {worst:.2e} [{}]", parts.join(", "))))
}

fn perron_contraction() -> Outcome {
    let model = rds(1.0, 9)?;
    let prob = &model.problem;
    let ladder = gap_ladder(&prob.op, prob.lipschitz, 1, DEFAULT_EPSILON).map_err(err)?;
    let (n, theta) = (ladder.dim(1), ladder.theta(1));
    let cfg = SolverConfig::default();
    let grid = imjet::parasolve::TimeGrid::half_line(&prob.op, n, theta, &cfg).map_err(err)?;
    let bound = 2.0 * prob.lipschitz / (prob.op.eigenvalue(n + 1) - prob.op.eigenvalue(n)) + 0.05;
    let mut worst = 0.0f64;
    for p in [[0.5, 0.0, 0.0], [0.3, -0.4, 0.2], [-0.6, 0.2, 0.1]] {
        let (_, rep) = backward_fixed_point(prob, n, theta, &p, grid, &cfg).map_err(err)?;
        worst = worst.max(rep.contraction);
    }
    Ok((worst <= bound, format!("N = {n}, L = {:.4}, observed ratio {worst:.3} ≤ {bound:.3}", prob.lipschitz)))
}

fn random_form(rng: &mut ChaCha8Rng, degree: usize, dim_in: usize, dim_out: usize) -> SymMultiForm {
    let len = multiset_count(dim_in, degree) * dim_out;
    SymMultiForm::from_coeffs(degree, dim_in, dim_out, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

fn random_jet(rng: &mut ChaCha8Rng, order: usize, dim_in: usize, dim_out: usize) -> Jet {
    Jet::new((0..=order).map(|k| random_form(rng, k, dim_in, dim_out)).collect(), true).expect("jet")
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Raw tensor contraction `P[x₁, …, x_k]` straight from the multiset storage,
/// independent of the library's evaluators.
fn contract(form: &SymMultiForm, args: &[&[f64]]) -> Vec<f64> {
    let (k, d, m) = (form.degree(), form.dim_in(), form.dim_out());
    let mut out = vec![0.0; m];
    let total = d.pow(k as u32);
    for flat in 0..total {
        let mut idx = Vec::with_capacity(k);
        let mut r = flat;
        for _ in 0..k {
            idx.push(r % d);
            r /= d;
        }
        let w: f64 = idx.iter().zip(args).map(|(&i, a)| a[i]).product();
        if w == 0.0 {
            continue;
        }
        for (o, slot) in out.iter_mut().enumerate() {
            *slot += w * form.entry(o, &idx);
        }
    }
    out
}

fn jet_calculus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let n = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=3usize);
        let m = rng.random_range(1..=2usize);
        // extraction round trip
        let jet = random_jet(&mut rng, n, d, m);
        let poly = |x: &[f64]| jet.eval(x).expect("dims");
        let back = extract_components(&poly, d, m, n).map_err(err)?;
        worst[0] = worst[0].max(back.max_abs_diff(&jet).map_err(err)?);
        // polarization of the diagonal recovers the form
        let form = jet.component(n).clone();
        let args: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, d)).collect();
        let refs: Vec<&[f64]> = args.iter().map(|a| a.as_slice()).collect();
        let diag = |x: &[f64]| form.eval(x).expect("dims");
        let pol = polarize(&diag, n, &refs).map_err(err)?;
        worst[1] = worst[1].max(norm(&sub(&pol, &contract(&form, &refs))));
        // binomial identity P(ξ+η) = Σ C(n,j) P[ξ^j, η^{n−j}]
        let (xi, eta) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let sum: Vec<f64> = xi.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let mut acc = vec![0.0; m];
        for j in 0..=n {
            let term = binomial_expand(&form, j).map_err(err)?;
            let v = term.eval(&xi, &eta).map_err(err)?;
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += term.weight() * x);
        }
        worst[2] = worst[2].max(norm(&sub(&acc, &form.eval(&sum).map_err(err)?)));
        // truncated composition against a ray-wise series expansion
        let (ni, no) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let inner = random_jet(&mut rng, ni, d, d);
        let outer = random_jet(&mut rng, no, d, m);
        let comp = compose_truncate(&outer, &inner, n).map_err(err)?;
        let x = random_vec(&mut rng, d);
        let want = composed_series(&outer, &inner, &x, n);
        worst[3] = worst[3].max(norm(&sub(&comp.eval(&x).map_err(err)?, &want)));
    }
    let pass = worst.iter().all(|w| *w <= 1e-10);
    Ok((
        pass,
        format!(
            "100 instances: extraction {:.1e}, polarization {:.1e}, binomial {:.1e}, composition {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

/// `Σ_{d ≤ order}` of the `s^d` coefficients of `outer(inner(s x) − inner(0))`.
fn composed_series(outer: &Jet, inner: &Jet, x: &[f64], order: usize) -> Vec<f64> {
    // c[k] = coefficient of s^k in inner(s x) − inner(0)
    let c: Vec<Vec<f64>> = (0..=order)
        .map(|k| {
            if k == 0 || k > inner.order() {
                return vec![0.0; inner.dim_out()];
            }
            let refs: Vec<&[f64]> = vec![x; k];
            contract(inner.component(k), &refs).iter().map(|v| v * inner.weight(k)).collect()
        })
        .collect();
    let mut out = outer.constant().to_vec();
    for mdeg in 1..=outer.order() {
        for tuple in degree_tuples(mdeg, order) {
            let refs: Vec<&[f64]> = tuple.iter().map(|&k| c[k].as_slice()).collect();
            let v = contract(outer.component(mdeg), &refs);
            out.iter_mut().zip(v).for_each(|(o, a)| *o += outer.weight(mdeg) * a);
        }
    }
    out
}

/// Ordered tuples `(k₁…k_m)` with `k_i ≥ 1` and `Σk_i ≤ max_sum`.
fn degree_tuples(m: usize, max_sum: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for k in 1..=max_sum {
        if max_sum < k + (m - 1) {
            break;
        }
        for mut rest in degree_tuples(m - 1, max_sum - k) {
            rest.insert(0, k);
            out.push(rest);
        }
    }
    out
}

/// Fitted exponent of `‖M(p + hξ) − M(p) − h M′(p)ξ‖` against `h`.
fn first_order_slope(chart: &ManifoldChart, p: &[f64], xi: &[f64], hs: &[f64]) -> Result<f64, String> {
    let m0 = chart.value(p).map_err(err)?;
    let (_, d) = chart.derivative(p, xi).map_err(err)?;
    let mut errs = Vec::new();
    for &h in hs {
        let q: Vec<f64> = p.iter().zip(xi).map(|(a, b)| a + h * b).collect();
        let mq = chart.value(&q).map_err(err)?;
        let r: Vec<f64> = mq.iter().zip(&m0).zip(&d).map(|((a, b), c)| a - b - h * c).collect();
        errs.push(norm(&r));
    }
    Ok(loglog_fit(hs, &errs).map(|f| f.0).unwrap_or(f64::NAN))
}

fn chart_consistency() -> Outcome {
    let eps = DEFAULT_EPSILON;
    let threshold = 1.0 + eps - 0.1;
    let hs = logspace(1e-3, 5e-2, 8);
    let (_, sell_ladder) = sell(1, 6, 0.5)?;
    let s_sell = first_order_slope(sell_ladder.chart(1), &[0.1], &[1.0], &hs)?;
    let model = rds(1.0, 9)?;
    let prob = model.problem.clone();
    let ladder = gap_ladder(&prob.op, prob.lipschitz, 1, eps).map_err(err)?;
    let chart = ManifoldChart::new(prob, ladder.dim(1), ladder.theta(1), SolverConfig::default()).map_err(err)?;
    let s_rds = first_order_slope(&chart, &[0.4, -0.2, 0.1], &[0.6, 0.5, -0.6], &hs)?;
    Ok((
        s_sell >= threshold && s_rds >= threshold,
        format!("remainder slopes Sell {s_sell:.3}, RDS {s_rds:.3} (threshold {threshold:.2})"),
    ))
}

fn jet_prediction() -> Outcome {
    let (_, jl) = sell(2, 6, 0.5)?;
    let scales = logspace(8e-4, 7.5e-2, 10);
    let rep = prediction_scan(&jl, &[0.15], &[1.0], &scales, 2).map_err(err)?;
    let (lo, hi) = (rep.deltas[0], rep.deltas[rep.deltas.len() - 1]);
    Ok((rep.slope >= 2.05, format!("slope {:.3} over ‖δ‖ ∈ [{lo:.1e}, {hi:.1e}] (threshold 2.05)", rep.slope)))
}

fn compat_scaling() -> Outcome {
    let (_, jl2) = sell(2, 6, 0.5)?;
    let alpha = jl2.ladder().epsilon;
    let scales = logspace(1e-3, 6e-2, 12);
    let r2 = compat_scan(&jl2, &[0.1], &[1.0], &[1.0, 0.4], &scales, 2, 2.0 + alpha - 0.15).map_err(err)?;
    let (_, jl3) = sell(3, 7, 0.5)?;
    let alpha3 = jl3.ladder().epsilon;
    let xi3 = [1.0, 0.4, 0.2, 0.1, 0.05];
    let r3 = compat_scan(&jl3, &[0.1], &[1.0], &xi3, &scales, 3, 3.0 + alpha3 - 0.2).map_err(err)?;
    Ok((
        r2.pass && r3.pass,
        format!(
            "n = 2: slope {:.3} ≥ {:.3} on {} pairs; n = 3 (ladder {:?}): slope {:.3} ≥ {:.3} on {} pairs",
            r2.slope,
            r2.threshold,
            r2.pairs.len(),
            jl3.ladder().dims(),
            r3.slope,
            r3.threshold,
            r3.pairs.len()
        ),
    ))
}

fn sell_extension(ladder: Arc<JetLadder>, nu: f64, lo: f64, hi: f64) -> Result<ExtendedManifold, String> {
    // base spacing chosen so neighbouring anchors are within ν/2
    let step = 0.4 * nu / 1.2;
    let count = ((hi - lo) / step).ceil() as usize + 1;
    let coords: Vec<Vec<f64>> = (0..count).map(|i| vec![lo + (hi - lo) * i as f64 / (count - 1) as f64]).collect();
    ExtendedManifold::build(ladder, &coords, ExtensionConfig::new(nu, 2)).map_err(err)
}

fn tracking() -> Outcome {
    let model = rds(1.0, 9)?;
    let prob = model.problem.clone();
    let ladder = gap_ladder(&prob.op, prob.lipschitz, 1, DEFAULT_EPSILON).map_err(err)?;
    let (n, theta) = (ladder.dim(1), ladder.theta(1));
    let cfg = SolverConfig::default();
    let opts = TrackingOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::INFINITY;
    for _ in 0..10 {
        let u0: Vec<f64> = (0..prob.dim()).map(|k| rng.random_range(-0.5..0.5) / (k + 1) as f64).collect();
        let (_, _, rep) = tracking_solve(&prob, n, theta, &u0, &cfg, &opts).map_err(|e| format!("RDS: {e}"))?;
        worst = worst.min(rep.fitted_rate);
    }
    let pass_rds = worst >= 0.95 * theta;
    // extended inertial form of Sell's cascade, tracking toward the embedded level-1 manifold
    let (_, jl) = sell(2, 6, 0.5)?;
    let jl = Arc::new(jl);
    let theta1 = jl.ladder().theta(1);
    let ext = Arc::new(sell_extension(jl.clone(), 0.1, -0.05, 0.3)?);
    let if_prob: SemilinearProblem = ExtendedInertialForm::problem(ext).map_err(err)?;
    let mut worst_if = f64::INFINITY;
    for _ in 0..5 {
        let p = rng.random_range(0.05..0.25);
        let m = jl.chart(1).value(&[p]).map_err(err)?;
        let u0 = [p, m[0] + rng.random_range(-0.05..0.05)];
        let (_, _, rep) = tracking_solve(&if_prob, 1, theta1, &u0, &cfg, &opts).map_err(|e| format!("extended form: {e}"))?;
        worst_if = worst_if.min(rep.fitted_rate);
    }
    let pass_if = worst_if >= 0.9 * theta1;
    Ok((
        pass_rds && pass_if,
        format!(
            "RDS: min rate {worst:.3} ≥ {:.3} (10 seeds); extended form: min rate {worst_if:.3} ≥ {:.3}",
            0.95 * theta,
            0.9 * theta1
        ),
    ))
}

fn extension_closeness() -> Outcome {
    let (_, jl) = sell(2, 6, 0.5)?;
    let jl = Arc::new(jl);
    let mut probes = Vec::new();
    for i in 0..4 {
        // the uncut u₂ growth leaves the level-2 chart undefined for large
        // normal offsets at small base coordinates, so probes start at 0.1
        let p = 0.1 + 0.02 * i as f64;
        let m = jl.chart(1).value(&[p]).map_err(err)?;
        for off in [-0.12, -0.06, -0.03, -0.015, 0.0, 0.015, 0.03, 0.06, 0.12] {
            probes.push(vec![p, m[0] + off]);
        }
    }
    let mut anchor = 0.0f64;
    let mut reports = Vec::new();
    for nu in [0.1, 0.05, 0.025] {
        let ext = sell_extension(jl.clone(), nu, 0.0, 0.18)?;
        for site in &ext.blend().sites {
            let level1 = jl.chart(1).value(&site.coords).map_err(err)?;
            let v = ext.eval(&site.point).map_err(err)?.value;
            anchor = anchor.max(norm(&sub(&v, &level1[1..])));
        }
        reports.push(closeness(&ext, &probes).map_err(err)?);
    }
    let dec = |f: &dyn Fn(usize) -> f64| f(1) < f(0) && f(2) < f(1);
    let c0 = dec(&|i| reports[i].c0_gap);
    let c1 = dec(&|i| reports[i].c1_gap);
    let gaps: Vec<String> =
        reports.iter().map(|r| format!("ν={}: C⁰ {:.2e}, C¹ {:.2e}", r.nu, r.c0_gap, r.c1_gap)).collect();
    Ok((anchor <= 1e-8 && c0 && c1, format!("anchoring {anchor:.1e}; {}", gaps.join("; "))))
}

fn modified_invariance() -> Outcome {
    let (_, jl) = sell(2, 6, 0.5)?;
    let jl = Arc::new(jl);
    let ext = sell_extension(jl.clone(), 0.1, -0.05, 0.3)?;
    let p = jl.base_point(&[0.25]).map_err(err)?.projected(2);
    let (_, sell_rep) = modified_flow_invariance(jl.problem(), &ext, &p, 10.0, 0.01).map_err(err)?;

    let model = rds(4.0, 6)?;
    let prob = model.problem.clone();
    let ladder = gap_ladder(&prob.op, prob.lipschitz, 2, DEFAULT_EPSILON).map_err(err)?;
    let rl = Arc::new(JetLadder::new(prob, ladder, SolverConfig::default()).map_err(err)?);
    let nu = 0.1;
    let count = 16;
    let coords: Vec<Vec<f64>> = (0..count).map(|i| vec![-0.05 + 0.45 * i as f64 / (count - 1) as f64]).collect();
    let rext = ExtendedManifold::build(rl.clone(), &coords, ExtensionConfig::new(nu, 2)).map_err(err)?;
    let q = rl.base_point(&[0.35]).map_err(err)?.projected(2);
    let (_, rds_rep) = modified_flow_invariance(rl.problem(), &rext, &q, 10.0, 0.005).map_err(err)?;
    Ok((
        sell_rep.max_defect <= 1e-6 && rds_rep.max_defect <= 1e-6,
        format!(
            "graph defect over t ∈ [0, 10]: Sell {:.2e}, RDS {:.2e} (ladder {:?})",
            sell_rep.max_defect,
            rds_rep.max_defect,
            rl.ladder().dims()
        ),
    ))
}

fn sell_closed_forms() -> Outcome {
    // explicit solution against a fourth-order central difference
    let h = 1e-3;
    let mut defect = 0.0f64;
    for n in 1..=5usize {
        let lam = 2f64.powi(n as i32 - 1);
        for i in 0..=50 {
            let t = 0.1 * i as f64;
            let u = |s: f64| sell_explicit(s, n).expect("index");
            let du = (8.0 * (u(t + h) - u(t - h)) - (u(t + 2.0 * h) - u(t - 2.0 * h))) / (12.0 * h);
            let src = if n == 1 { 0.0 } else { sell_explicit(t, n - 1).map_err(err)?.powi(2) };
            defect = defect.max((du + lam * u(t) - src).abs());
        }
    }
    let c = sell_constants(4).map_err(err)?;
    let want = [1.0, 1.0 / 3.0, 1.0 / 63.0];
    let const_err = c[1..4].iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut cert_ok = true;
    let mut min_res = f64::INFINITY;
    for n in 1..=3 {
        let cert = sell_c2_obstruction(n).map_err(err)?;
        cert_ok &= cert.coefficient == 0.0 && cert.forcing == 1.0 && cert.passed;
        min_res = min_res.min(cert.grid_min_residual);
    }
    let mut probe_ok = true;
    for n in 1..=2usize {
        let top = (1usize << n) - 1;
        probe_ok &= sell_smoothness_probe(n, top).map_err(err)?.bounded;
        probe_ok &= !sell_smoothness_probe(n, top + 1).map_err(err)?.bounded;
    }
    Ok((
        defect <= 1e-10 && const_err <= 1e-10 && cert_ok && probe_ok,
        format!(
            "ODE defect {defect:.1e}, constants {const_err:.1e}, certificate {} (min residual {min_res:.2}), smoothness probe {}",
            if cert_ok { "ok" } else { "FAILED" },
            if probe_ok { "ok" } else { "FAILED" }
        ),
    ))
}

fn main() {
    let criteria: [(usize, &str, f64, fn() -> Outcome); 10] = [
        (1, "Green-operator norm", 30.0, green_norm),
        (2, "Perron contraction", 60.0, perron_contraction),
        (3, "jet calculus exactness", 10.0, jet_calculus),
        (4, "C^{1,ε} chart consistency", 120.0, chart_consistency),
        (5, "order-2 jet prediction", 120.0, jet_prediction),
        (6, "compatibility scaling", 600.0, compat_scaling),
        (7, "exponential tracking", 300.0, tracking),
        (8, "extension anchoring and closeness", 300.0, extension_closeness),
        (9, "modified-nonlinearity invariance", 180.0, modified_invariance),
        (10, "Sell closed forms", 60.0, sell_closed_forms),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, budget, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(Ok((pass, detail))) => (pass, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = secs <= budget;
        let ok = pass && in_time;
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {}: {name} — {detail} [{secs:.1} s / {budget:.0} s{}]",
            if ok { "PASS" } else { "FAIL" },
            if in_time { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
