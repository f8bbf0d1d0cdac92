//! Closed-form Sell demonstration and the reaction–diffusion demo.

use imjet::models::{
    sell_c2_obstruction, sell_constants, sell_explicit, sell_extended_chart, sell_manifold_chart, sell_modified_rhs,
    sell_smoothness_probe,
};
use imjet::parasolve::{forward_solve, integrate_exponential, ForwardOptions};
use imjet::perron::{invariance_defect, ManifoldChart};
use serde_json::json;

use crate::context::{Context, Failure, Model, TaskResult};
use crate::output::{Check, Table, TaskOutput};

pub fn sell_demo(ctx: &Context) -> TaskResult<TaskOutput> {
    let d = &ctx.cfg.sell_demo;
    let (window, modes) = match ctx.model()? {
        Model::Sell(m) => (m.params.window, m.params.modes),
        Model::Rds(_) => (imjet::models::SellParams::default().window, imjet::models::SellParams::default().modes),
    };
    // explicit solution against a fourth-order central difference of the ODE
    let h = 1e-3;
    let mut explicit = Table::new("explicit", &["n", "t", "defect"]);
    let mut defect = 0.0f64;
    for n in 1..=d.components {
        let lam = 2f64.powi(n as i32 - 1);
        let u = |s: f64| sell_explicit(s, n);
        let steps = (d.horizon / 0.1).round() as usize;
        for i in 0..=steps {
            let t = d.horizon * i as f64 / steps as f64;
            let du = (8.0 * (u(t + h)? - u(t - h)?) - (u(t + 2.0 * h)? - u(t - 2.0 * h)?)) / (12.0 * h);
            let src = if n == 1 { 0.0 } else { sell_explicit(t, n - 1)?.powi(2) };
            let r = (du + lam * u(t)? - src).abs();
            defect = defect.max(r);
            explicit.push(vec![n as f64, t, r]);
        }
    }
    let constants = sell_constants(d.components.saturating_sub(1).max(3))?;
    let known = [1.0, 1.0, 1.0 / 3.0, 1.0 / 63.0];
    let const_err = constants.iter().zip(known).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let certs = (1..=d.resonances).map(sell_c2_obstruction).collect::<imjet::Result<Vec<_>>>()?;
    let certs_ok = certs.iter().all(|c| c.passed && c.coefficient == 0.0 && c.forcing == 1.0);
    let mut probes = Vec::new();
    let mut probe_ok = true;
    for n in 1..=d.probe_levels {
        let top = (1usize << n) - 1;
        let bounded = sell_smoothness_probe(n, top)?;
        let divergent = sell_smoothness_probe(n, top + 1)?;
        probe_ok &= bounded.bounded && !divergent.bounded;
        probes.push(json!({ "n": n, "bounded_through": top, "bounded": bounded, "at_next_order": divergent }));
    }
    // the extended graph over the first two modes is invariant for the modified cascade
    let split = 2;
    if !(d.base.abs() < window) || modes <= split {
        return Err(Failure::Schema(format!("sell_demo.base must lie in the window {window} and K > {split}")));
    }
    let mut u0 = vec![d.base, sell_manifold_chart(d.base, 2, window)?];
    u0.extend(sell_extended_chart(&u0, split, modes, window)?);
    let lambdas: Vec<f64> = (0..modes).map(|k| 2f64.powi(k as i32)).collect();
    let rhs = |u: &[f64]| sell_modified_rhs(u, split, window);
    let opts = ForwardOptions { richardson: true, ..ForwardOptions::new(0.01) };
    let traj = integrate_exponential(&lambdas, &rhs, &u0, d.horizon, opts)?;
    let mut invariance = Table::new("invariance", &["t", "defect"]);
    let mut inv_max = 0.0f64;
    for j in 0..traj.nodes() {
        let u = traj.at(j);
        let graph = sell_extended_chart(&u[..split], split, modes, window)?;
        let r = graph.iter().zip(&u[split..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        inv_max = inv_max.max(r);
        invariance.push(vec![traj.grid.time(j), r]);
    }
    Ok(TaskOutput {
        results: json!({
            "explicit_defect": defect,
            "constants": constants,
            "constant_error": const_err,
            "obstruction": certs,
            "smoothness": probes,
            "extended_invariance": { "split": split, "base": d.base, "horizon": d.horizon, "max_defect": inv_max },
        }),
        checks: vec![
            Check::at_most(Some(10), "explicit-solution ODE defect", defect, 1e-10),
            Check::at_most(Some(10), "constants against 1, 1, 1/3, 1/63", const_err, 1e-10),
            Check::holds(Some(10), "resonance obstruction certificates", certs_ok),
            Check::holds(Some(10), "smoothness probe bounded then divergent", probe_ok),
            Check::at_most(None, "extended graph defect under the modified cascade", inv_max, 1e-7),
        ],
        tables: vec![explicit, invariance],
        files: vec![],
        runtime: serde_json::Value::Null,
    })
}

pub fn rds_demo(ctx: &Context) -> TaskResult<TaskOutput> {
    let model = match ctx.model()? {
        Model::Rds(m) => m,
        Model::Sell(_) => return Err(Failure::Schema("rds-demo needs model.name = \"rds\"".into())),
    };
    let d = &ctx.cfg.rds_demo;
    let prob = ctx.problem()?;
    let cfg = ctx.solver();
    let u0 = ctx.initial_data(prob.dim())?;
    let dt = cfg.step_for(&prob.op);
    let traj = forward_solve(&prob, &u0, d.horizon, ForwardOptions::new(dt))?;
    // sup norm on the collocation grid, against max(‖u₀‖∞, 1) — the level
    // set the cubic reaction cannot cross
    let nl = model.nonlinearity();
    let sup = |c: &[f64]| nl.synthesize(c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let start = sup(&u0);
    let bound = start.max(1.0);
    let peak = (0..traj.nodes()).map(|j| sup(traj.at(j))).fold(0.0, f64::max);
    let ladder = ctx.ladder(1)?;
    let chart = ManifoldChart::new(prob.clone(), ladder.dim(1), ladder.theta(1), cfg.clone())?;
    let p = &u0[..ladder.dim(1)];
    let inv = invariance_defect(&chart, p, d.invariance_time)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    Ok(TaskOutput {
        results: json!({
            "params": model.params,
            "eigenvalues": prob.op.eigenvalues(),
            "lipschitz": prob.lipschitz,
            "ladder": ladder,
            "initial": u0,
            "dissipativity": { "initial_sup": start, "peak_sup": peak, "bound": bound },
            "invariance": inv,
        }),
        checks: vec![
            Check::at_most(None, "peak sup norm over max(initial, 1)", peak / bound, 1.0 + 1e-2),
            Check::at_most(None, "level-1 chart invariance defect", inv.defect, 1e-6),
        ],
        tables: vec![],
        files: vec![("rds-demo.trajectory.csv".into(), csv)],
        runtime: serde_json::Value::Null,
    })
}
