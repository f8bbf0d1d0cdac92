//! Taylor jets of the manifold graph along the lowest manifold.
//!
//! Along a backward trajectory `W = V₁(p, ·)` of the level-1 manifold, the
//! level-`m` trajectories through `P_{N_m}W(0) + ξ` all pass through `W` at
//! `ξ = 0`. Their Taylor coefficients in `ξ` solve a lower-triangular family
//! of linear equations: with `a` the level-`m` jet and `b` the unknown
//! level-`(m+1)` jet (both without constant term),
//!
//! ```text
//!   ∂t b + Ab = trunc_{m+1}[ F(W + a) + F′(W + a)(b − a) ],
//!   P_{N_{m+1}} b(0) = P_{N_{m+1}} ξ  (degree 1),   0  (degrees ≥ 2),
//! ```
//!
//! and the degree-`i` part involves `b_i` only through `F′(W)b_i`, so the
//! coefficients are found degree by degree, each in the space weighted by
//! `θ_{m+1} + (i−1)θ_m`. The top-level coefficients at `t = 0` are the jet
//! of the top chart; symmetric forms are recovered from directional solves
//! on a lattice of directions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::jetcalc::{compat_residual, lattice_points, multiset_count, Jet, SymMultiForm};
use crate::numerics::{loglog_fit, norm, sub};
use crate::parasolve::{
    variational_solve_linearized, FixedPointReport, Linearization, SemilinearProblem, SolverConfig, TimeGrid,
    WeightedTrajectory,
};
use crate::perron::ManifoldChart;
use crate::spectral::GapLadder;

/// Highest jet order supported by the ladder machinery.
pub const MAX_JET_ORDER: usize = 4;

/// Relative round-off floor: residuals below this times the jet scale are
/// treated as exact zeros by the scaling fits.
pub const RESIDUAL_FLOOR: f64 = 1e-14;

/// Per-level grids on a common step: every level's window is a suffix of
/// the level-1 window.
pub fn level_grids(prob: &SemilinearProblem, ladder: &GapLadder, cfg: &SolverConfig) -> Result<Vec<TimeGrid>> {
    let dt = cfg.step_for(&prob.op);
    let horizons = crate::parasolve::ladder_horizons(&prob.op, ladder, cfg);
    let mut out: Vec<TimeGrid> = Vec::with_capacity(horizons.len());
    for t in horizons {
        let mut steps = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
        if let Some(prev) = out.last() {
            steps = steps.min(prev.nodes - 1);
        }
        out.push(TimeGrid { t0: -(steps as f64) * dt, dt, nodes: steps + 1 });
    }
    Ok(out)
}

/// A point of the level-1 manifold with its backward trajectory and the
/// nodewise linearization along it.
#[derive(Clone)]
pub struct BasePoint {
    /// Level-1 base coordinates `p ∈ H_{N₁}`.
    pub coords: Vec<f64>,
    /// `W(0) = p + M_{N₁}(p)`.
    pub state: Vec<f64>,
    pub trajectory: Arc<WeightedTrajectory>,
    linearization: Arc<Linearization>,
}

impl std::fmt::Debug for BasePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BasePoint").field("coords", &self.coords).field("state", &self.state).finish()
    }
}

impl BasePoint {
    /// `P_N W(0)`.
    pub fn projected(&self, n: usize) -> Vec<f64> {
        self.state[..n].to_vec()
    }
}

/// Directional coefficients of every level along one direction `ξ`:
/// `levels[m][i−1]` is the degree-`i` coefficient trajectory at level `m+1`.
#[derive(Debug, Clone)]
pub struct DirectionalJet {
    pub direction: Vec<f64>,
    pub levels: Vec<Vec<WeightedTrajectory>>,
    pub reports: Vec<Vec<FixedPointReport>>,
}

impl DirectionalJet {
    /// Top-level coefficient values at `t = 0`, degrees `1..`.
    pub fn top_values(&self) -> Vec<Vec<f64>> {
        self.levels.last().map(|l| l.iter().map(|t| t.last().to_vec()).collect()).unwrap_or_default()
    }
}

/// Jet machinery for one problem and gap ladder.
pub struct JetLadder {
    prob: SemilinearProblem,
    ladder: GapLadder,
    cfg: SolverConfig,
    grids: Vec<TimeGrid>,
    charts: Vec<ManifoldChart>,
}

impl std::fmt::Debug for JetLadder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JetLadder").field("ladder", &self.ladder).field("grids", &self.grids).finish()
    }
}

impl JetLadder {
    pub fn new(prob: SemilinearProblem, ladder: GapLadder, cfg: SolverConfig) -> Result<Self> {
        if ladder.is_empty() {
            return Err(Error::Input("empty gap ladder".into()));
        }
        if ladder.top_dim() >= prob.dim() {
            return Err(Error::Capability(format!(
                "truncation K = {} leaves no modes above N = {}",
                prob.dim(),
                ladder.top_dim()
            )));
        }
        let grids = level_grids(&prob, &ladder, &cfg)?;
        let charts = (1..=ladder.len())
            .map(|m| ManifoldChart::with_grid(prob.clone(), ladder.dim(m), ladder.theta(m), cfg.clone(), grids[m - 1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prob, ladder, cfg, grids, charts })
    }

    /// Restrict every level's chart to the local window `max|p_i| < β`.
    pub fn with_window(mut self, beta: f64) -> Self {
        self.charts = self.charts.into_iter().map(|c| c.with_window(beta)).collect();
        self
    }

    pub fn problem(&self) -> &SemilinearProblem {
        &self.prob
    }

    pub fn ladder(&self) -> &GapLadder {
        &self.ladder
    }

    pub fn levels(&self) -> usize {
        self.ladder.len()
    }

    pub fn grid(&self, level: usize) -> TimeGrid {
        self.grids[level - 1]
    }

    pub fn chart(&self, level: usize) -> &ManifoldChart {
        &self.charts[level - 1]
    }

    pub fn top_dim(&self) -> usize {
        self.ladder.top_dim()
    }

    /// The level-1 manifold point over `p ∈ H_{N₁}`.
    pub fn base_point(&self, p: &[f64]) -> Result<BasePoint> {
        let traj = self.charts[0].trajectory(p)?;
        let state = traj.0.last().to_vec();
        let lin = Linearization::new(&self.prob, &traj.0);
        Ok(BasePoint {
            coords: p.to_vec(),
            state,
            trajectory: Arc::new(traj.0.clone()),
            linearization: Arc::new(lin),
        })
    }

    /// Coefficients of every level along `ξ ∈ H_{N_top}` up to `order`
    /// (level `m` carries degrees `1..=min(m, order)`).
    pub fn directional(&self, base: &BasePoint, xi: &[f64], order: usize) -> Result<DirectionalJet> {
        check_dim("direction", xi.len(), self.top_dim())?;
        if order == 0 || order > MAX_JET_ORDER {
            return Err(Error::Capability(format!("jet order {order} outside 1..={MAX_JET_ORDER}")));
        }
        if order > self.levels() {
            return Err(Error::Capability(format!(
                "order {order} needs a ladder of {order} levels, have {}",
                self.levels()
            )));
        }
        let k = self.prob.dim();
        let mut levels: Vec<Vec<WeightedTrajectory>> = Vec::with_capacity(self.levels());
        let mut reports = Vec::with_capacity(self.levels());
        for m in 1..=self.levels() {
            let grid = self.grids[m - 1];
            let nodes = grid.nodes;
            let split = self.ladder.dim(m);
            let w = base.trajectory.tail(nodes);
            let lin = base.linearization.tail(nodes);
            let lower: Vec<WeightedTrajectory> = levels.last().map(|l| l.iter().map(|t| t.tail(nodes)).collect()).unwrap_or_default();
            let mut current: Vec<WeightedTrajectory> = Vec::new();
            let mut level_reports = Vec::new();
            for i in 1..=m.min(order) {
                let theta = self.ladder.jet_exponent(m, i);
                let h = if i == 1 {
                    WeightedTrajectory::zeros(grid, k, theta)
                } else {
                    rhs_truncated(&self.prob, &w, &lower, &current, i)?.swap_remove(i - 1).with_theta(theta)
                };
                let mut bc = vec![0.0; k];
                if i == 1 {
                    bc[..split].copy_from_slice(&xi[..split]);
                }
                let (b, rep) = variational_solve_linearized(&self.prob.op, &lin, split, theta, &h, &bc, &self.cfg)?;
                current.push(b);
                level_reports.push(rep);
            }
            levels.push(current);
            reports.push(level_reports);
        }
        Ok(DirectionalJet { direction: xi.to_vec(), levels, reports })
    }

    /// Order-`order` jet of the top chart `M_{N_top}` at `P_{N_top}W(0)`,
    /// in the `1/k!` convention, with inputs in `H_{N_top}` and outputs in
    /// `Q_{N_top}`.
    pub fn jet(&self, base: &BasePoint, order: usize) -> Result<Jet> {
        Ok(self.jet_with_report(base, order)?.jet)
    }

    pub fn jet_with_report(&self, base: &BasePoint, order: usize) -> Result<JetReport> {
        let n = self.top_dim();
        let k = self.prob.dim();
        let constant = SymMultiForm::constant(n, &base.state[n..]);
        if order == 0 {
            return Ok(JetReport { jet: Jet::new(vec![constant], true)?, growth: vec![], directions: 0 });
        }
        let points = lattice_points(n, order);
        let solves: Vec<DirectionalJet> =
            points.par_iter().map(|xi| self.directional(base, xi, order)).collect::<Result<_>>()?;
        let mut comps = vec![constant];
        let mut growth = Vec::with_capacity(order);
        for i in 1..=order {
            let values: Vec<Vec<f64>> = solves.iter().map(|d| d.top_values()[i - 1][n..k].to_vec()).collect();
            comps.push(SymMultiForm::fit_homogeneous(i, n, &points, &values)?);
            let g = solves
                .iter()
                .map(|d| {
                    let top = d.levels.last().expect("at least one level");
                    top[i - 1].weighted_sup() / norm(&d.direction).powi(i as i32)
                })
                .fold(0.0, f64::max);
            growth.push(g);
        }
        Ok(JetReport { jet: Jet::new(comps, false)?.to_factorial(), growth, directions: points.len() })
    }
}

/// A top-level jet with the weighted growth constants of its coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct JetReport {
    pub jet: Jet,
    /// `max_ξ ‖b_k(ξ)‖_{C_θ} / ‖ξ‖^k` per degree (weighted sup norms).
    pub growth: Vec<f64>,
    pub directions: usize,
}

/// Forcing of the level-`(m+1)` jet equation, degree by degree.
///
/// Returns components `1..=order` of
/// `trunc_order[F(W + a) + F′(W + a)(b − a)]` with `a` the lower-level jet
/// (degrees `1..`) and `b` the known part of the new jet; missing degrees of
/// either are zero. The degree-`i` component with `b` known below `i` is
/// exactly the right-hand side of the degree-`i` equation.
pub fn rhs_truncated(
    prob: &SemilinearProblem,
    w: &WeightedTrajectory,
    lower: &[WeightedTrajectory],
    known: &[WeightedTrajectory],
    order: usize,
) -> Result<Vec<WeightedTrajectory>> {
    let k = prob.dim();
    let nodes = w.nodes();
    for t in lower.iter().chain(known) {
        if t.nodes() != nodes || t.dim != k {
            return Err(Error::Precondition("lower-level jets must share the base grid".into()));
        }
    }
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(nodes * k); order];
    let zero = vec![0.0; k];
    for j in 0..nodes {
        let mut x = Vec::with_capacity(order + 1);
        x.push(w.at(j).to_vec());
        let mut d = Vec::with_capacity(order + 1);
        d.push(zero.clone());
        for i in 1..=order {
            let a = lower.get(i - 1).map(|t| t.at(j)).unwrap_or(&zero);
            let b = known.get(i - 1).map(|t| t.at(j)).unwrap_or(&zero);
            x.push(a.to_vec());
            d.push(sub(b, a));
        }
        let s = prob
            .nl
            .series(&x)
            .ok_or_else(|| Error::Capability("nonlinearity provides no Taylor series".into()))?;
        let l = prob
            .nl
            .series_linearized(&x, &d)
            .ok_or_else(|| Error::Capability("nonlinearity provides no linearized series".into()))?;
        for i in 1..=order {
            out[i - 1].extend(s[i].iter().zip(&l[i]).map(|(p, q)| p + q));
        }
    }
    out.into_iter().map(|v| WeightedTrajectory::from_values(w.grid, k, w.theta, v)).collect()
}

/// `F″(u)[x, y]` by polarization of the degree-2 Taylor coefficient.
fn second_derivative(prob: &SemilinearProblem, u: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let c2 = |v: &[f64]| -> Result<Vec<f64>> {
        let s = prob
            .nl
            .series(&[u.to_vec(), v.to_vec(), vec![0.0; u.len()]])
            .ok_or_else(|| Error::Capability("nonlinearity provides no Taylor series".into()))?;
        Ok(s[2].clone())
    };
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let (s, a, b) = (c2(&xy)?, c2(x)?, c2(y)?);
    Ok(s.iter().zip(&a).zip(&b).map(|((p, q), r)| p - q - r).collect())
}

/// Second variation `W″` at level 2: the solution of
/// `∂t W″ + AW″ − F′(W)W″ = 2F″(W)[V′, W′] − F″(W)[V′, V′]`,
/// `P_{N₂}W″(0) = 0`, in the space weighted by `θ₁ + θ₂`, where `V′` and `W′`
/// are the level-1 and level-2 variations along `ξ ∈ H_{N₂}`.
pub fn second_jet(ladder: &JetLadder, base: &BasePoint, xi: &[f64]) -> Result<WeightedTrajectory> {
    if ladder.levels() < 2 {
        return Err(Error::Capability("second jet needs a ladder with two levels".into()));
    }
    let prob = ladder.problem();
    let k = prob.dim();
    let n2 = ladder.ladder().dim(2);
    check_dim("direction", xi.len(), n2)?;
    let grid = ladder.grid(2);
    let nodes = grid.nodes;
    let lin = base.linearization.tail(nodes);
    let cfg = &ladder.cfg;
    let zero1 = WeightedTrajectory::zeros(ladder.grid(1), k, ladder.ladder().theta(1));
    let mut bc1 = vec![0.0; k];
    let n1 = ladder.ladder().dim(1);
    bc1[..n1].copy_from_slice(&xi[..n1]);
    let (v1, _) =
        variational_solve_linearized(&prob.op, &base.linearization, n1, ladder.ladder().theta(1), &zero1, &bc1, cfg)?;
    let v1 = v1.tail(nodes);
    let zero2 = WeightedTrajectory::zeros(grid, k, ladder.ladder().theta(2));
    let mut bc2 = vec![0.0; k];
    bc2[..n2].copy_from_slice(xi);
    let (w1, _) = variational_solve_linearized(&prob.op, &lin, n2, ladder.ladder().theta(2), &zero2, &bc2, cfg)?;
    let theta = ladder.ladder().jet_exponent(2, 2);
    let w = base.trajectory.tail(nodes);
    let mut h = Vec::with_capacity(nodes * k);
    for j in 0..nodes {
        let cross = second_derivative(prob, w.at(j), v1.at(j), w1.at(j))?;
        let diag = second_derivative(prob, w.at(j), v1.at(j), v1.at(j))?;
        h.extend(cross.iter().zip(&diag).map(|(c, d)| 2.0 * c - d));
    }
    let h = WeightedTrajectory::from_values(grid, k, theta, h)?;
    let (sol, _) = variational_solve_linearized(&prob.op, &lin, n2, theta, &h, &vec![0.0; k], cfg)?;
    Ok(sol)
}

/// Degree-`k` coefficient form of the level-`level` trajectory at `t = 0`
/// (raw derivative convention: the form is `W⁽ᵏ⁾(p)[ξ^k] = k!·b_k(ξ)`).
#[derive(Debug, Clone, Serialize)]
pub struct HigherJet {
    pub level: usize,
    pub degree: usize,
    /// Full-state values at `t = 0` (dimension `K`), inputs in `H_{N_level}`.
    pub form: SymMultiForm,
    /// `max_ξ ‖W⁽ᵏ⁾_ξ‖_{C_θ} / ‖ξ‖^k` over the lattice directions.
    pub growth_constant: f64,
}

/// `W⁽ᵏ⁾` at ladder level `level` (requires `k ≤ level`).
pub fn higher_jet(ladder: &JetLadder, base: &BasePoint, level: usize, k: usize) -> Result<HigherJet> {
    if level == 0 || level > ladder.levels() {
        return Err(Error::Capability(format!("level {level} outside 1..={}", ladder.levels())));
    }
    if k == 0 || k > level {
        return Err(Error::Capability(format!("degree {k} not available at level {level}")));
    }
    let sub_ladder = if level == ladder.levels() {
        None
    } else {
        Some(JetLadder::new(ladder.prob.clone(), ladder.ladder.truncated(level), ladder.cfg.clone())?)
    };
    let lad = sub_ladder.as_ref().unwrap_or(ladder);
    let n = lad.top_dim();
    let points = lattice_points(n, k);
    let fact = crate::numerics::factorial(k);
    let solves: Vec<DirectionalJet> =
        points.par_iter().map(|xi| lad.directional(base, xi, k)).collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> =
        solves.iter().map(|d| d.top_values()[k - 1].iter().map(|v| v * fact).collect()).collect();
    let growth_constant = solves
        .iter()
        .map(|d| fact * d.levels.last().expect("levels")[k - 1].weighted_sup() / norm(&d.direction).powi(k as i32))
        .fold(0.0, f64::max);
    let form = SymMultiForm::fit_homogeneous(k, n, &points, &values)?;
    debug_assert_eq!(form.coeffs().len(), multiset_count(n, k) * lad.problem().dim());
    Ok(HigherJet { level, degree: k, form, growth_constant })
}

/// `jet_ladder`: the order-`order` jet of the top chart at the level-1
/// manifold point over `p`.
pub fn jet_ladder(ladder: &JetLadder, p: &[f64], order: usize) -> Result<Jet> {
    let base = ladder.base_point(p)?;
    ladder.jet(&base, order)
}

/// A sampled jet with its anchor `P_{N_top}W(0)`.
#[derive(Debug, Clone, Serialize)]
pub struct JetSample {
    pub base: Vec<f64>,
    pub jet: Jet,
}

/// One pair of a compatibility scan.
#[derive(Debug, Clone, Serialize)]
pub struct CompatPair {
    pub delta_norm: f64,
    pub xi_norm: f64,
    pub radius: f64,
    pub residual: f64,
}

/// Result of [`manifold_compat_check`].
#[derive(Debug, Clone, Serialize)]
pub struct CompatReport {
    pub order: usize,
    pub pairs: Vec<CompatPair>,
    pub slope: f64,
    pub threshold: f64,
    /// True when every residual sits below [`RESIDUAL_FLOOR`] times the
    /// largest coefficient of the anchor jet.
    pub degenerate: bool,
    pub pass: bool,
}

/// Fit the joint exponent of `‖J_p(ξ + δ) − J_{p₁}(ξ)‖ ≤ C(‖ξ‖ + ‖δ‖)^{n+α}`
/// over pairs `(anchor, others[i])` probed at `xis[i]`; passes when the
/// log-log slope is at least `threshold`.
pub fn manifold_compat_check(
    anchor: &JetSample,
    others: &[JetSample],
    xis: &[Vec<f64>],
    order: usize,
    threshold: f64,
) -> Result<CompatReport> {
    if others.len() < 10 {
        return Err(Error::InsufficientSamples(format!("{} pairs supplied, at least 10 required", others.len())));
    }
    check_dim("probe count", xis.len(), others.len())?;
    let mut pairs = Vec::with_capacity(others.len());
    for (o, xi) in others.iter().zip(xis) {
        let delta = sub(&o.base, &anchor.base);
        let residual = compat_residual(&o.jet, &anchor.jet, &delta, xi)?;
        let (dn, xn) = (norm(&delta), norm(xi));
        pairs.push(CompatPair { delta_norm: dn, xi_norm: xn, radius: dn + xn, residual });
    }
    let (rmin, rmax) = pairs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), p| (a.min(p.radius), b.max(p.radius)));
    if !(rmax / rmin >= 10f64.powf(1.5) * (1.0 - 1e-9)) {
        return Err(Error::InsufficientSamples(format!("radii span {rmin:e}..{rmax:e}, need 1.5 decades")));
    }
    // round-off floor, relative to the size of the anchor jet's coefficients
    let scale = anchor.jet.components().iter().flat_map(|c| c.coeffs()).fold(0.0f64, |m, c| m.max(c.abs()));
    let floor = RESIDUAL_FLOOR * scale;
    let fit: Vec<&CompatPair> = pairs.iter().filter(|p| p.residual > 0.0 && p.residual >= floor).collect();
    let (slope, degenerate) = if fit.len() < 2 {
        (f64::INFINITY, true)
    } else {
        let xs: Vec<f64> = fit.iter().map(|p| p.radius).collect();
        let ys: Vec<f64> = fit.iter().map(|p| p.residual).collect();
        (loglog_fit(&xs, &ys).map(|f| f.0).unwrap_or(f64::NAN), false)
    };
    Ok(CompatReport { order, pairs, slope, threshold, degenerate, pass: slope >= threshold })
}

/// Base-point scan along the level-1 base: anchor `p`, partners
/// `p + s·dir` for each scale `s`, probes `ξ = s·xi_dir` (unit-normalized).
pub fn compat_scan(
    ladder: &JetLadder,
    anchor_p: &[f64],
    dir: &[f64],
    xi_dir: &[f64],
    scales: &[f64],
    order: usize,
    threshold: f64,
) -> Result<CompatReport> {
    let n = ladder.top_dim();
    let sample = |p: &[f64]| -> Result<JetSample> {
        let base = ladder.base_point(p)?;
        Ok(JetSample { base: base.projected(n), jet: ladder.jet(&base, order)? })
    };
    let anchor = sample(anchor_p)?;
    let others: Vec<JetSample> = scales
        .iter()
        .map(|s| {
            let p: Vec<f64> = anchor_p.iter().zip(dir).map(|(a, d)| a + s * d).collect();
            sample(&p)
        })
        .collect::<Result<_>>()?;
    let unit = norm(xi_dir);
    let xis: Vec<Vec<f64>> = scales.iter().map(|s| xi_dir.iter().map(|v| s * v / unit).collect()).collect();
    manifold_compat_check(&anchor, &others, &xis, order, threshold)
}

/// Prediction error of a top-level jet along the level-1 base.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    pub order: usize,
    pub deltas: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

/// `‖M_{N_top}(p + δ) − J_δ‖` for partners `p + s·dir` on the level-1 base,
/// with the log-log slope against `‖δ‖`.
pub fn prediction_scan(ladder: &JetLadder, anchor_p: &[f64], dir: &[f64], scales: &[f64], order: usize) -> Result<PredictionReport> {
    let n = ladder.top_dim();
    let base = ladder.base_point(anchor_p)?;
    let jet = ladder.jet(&base, order)?;
    let top = ladder.chart(ladder.levels());
    let anchor = base.projected(n);
    let mut deltas = Vec::new();
    let mut errors = Vec::new();
    for s in scales {
        let p: Vec<f64> = anchor_p.iter().zip(dir).map(|(a, d)| a + s * d).collect();
        let q = ladder.base_point(&p)?.projected(n);
        let delta = sub(&q, &anchor);
        let exact = top.value(&q)?;
        let pred = jet.eval(&delta)?;
        deltas.push(norm(&delta));
        errors.push(norm(&sub(&exact, &pred)));
    }
    let slope = loglog_fit(&deltas, &errors).map(|f| f.0).unwrap_or(f64::INFINITY);
    Ok(PredictionReport { order, deltas, errors, slope })
}
