//! Perron construction of the manifold graph.
//!
//! For a split `N` and an exponent `θ` inside the gap window, the backward
//! trajectory through a base point `p ∈ H_N` is the fixed point of
//! `u = 𝒯F(u) + ℋ(p)` in the space weighted by `e^{θt}` on `t ≤ 0`; the graph
//! is read off at `t = 0`. The same Green operator on a window straddling
//! `t = 0` gives the tracking trajectory on the manifold.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::jetcalc::Jet;
use crate::numerics::{linear_fit, norm, sub, Smoothstep};
use crate::parasolve::{
    fixed_point, forward_solve, homog_apply, variational_solve, weighted_scale, FixedPointReport, ForwardOptions,
    GreenOperator, SemilinearProblem, SolverConfig, TimeGrid, WeightedTrajectory,
};

/// Minimum number of point pairs for [`lipschitz_probe`].
pub const MIN_PROBE_PAIRS: usize = 50;

fn check_gap_window(prob: &SemilinearProblem, n: usize, theta: f64) -> Result<()> {
    if n == 0 || n >= prob.dim() {
        return Err(Error::Input(format!("split {n} outside 1..{}", prob.dim())));
    }
    let (lo, hi) = prob.op.theta_window(n, prob.lipschitz);
    if !(lo < hi) {
        return Err(Error::Precondition(format!(
            "no spectral gap at N = {n}: λ_{{N+1}} − λ_N = {} ≤ 2L = {}",
            prob.op.gap(n),
            2.0 * prob.lipschitz
        )));
    }
    if !(theta > lo && theta < hi) {
        return Err(Error::Precondition(format!("θ = {theta} outside the gap window ({lo}, {hi})")));
    }
    Ok(())
}

fn pad_base(p: &[f64], n: usize, k: usize) -> Result<Vec<f64>> {
    if p.len() != n && p.len() != k {
        return Err(Error::Input(format!("base point of dimension {}, expected {n} or {k}", p.len())));
    }
    let mut full = vec![0.0; k];
    full[..n].copy_from_slice(&p[..n]);
    Ok(full)
}

/// Backward trajectory `V(p, ·)` on `grid` (which must end at `t = 0`).
///
/// `p` may be given by its `N` base coordinates or as a full vector, in which
/// case only `P_N p` is used.
pub fn backward_fixed_point(
    prob: &SemilinearProblem,
    n: usize,
    theta: f64,
    p: &[f64],
    grid: TimeGrid,
    cfg: &SolverConfig,
) -> Result<(WeightedTrajectory, FixedPointReport)> {
    check_gap_window(prob, n, theta)?;
    let k = prob.dim();
    let base = pad_base(p, n, k)?;
    let nodes = grid.nodes;
    let hom = homog_apply(&prob.op, n, &base, grid, theta)?;
    let green = GreenOperator::new(&prob.op, n, grid.dt);
    let scale = weighted_scale(&grid, k, theta);
    let mut src = vec![0.0; nodes * k];
    let mut out = vec![0.0; nodes * k];
    let (v, report) = fixed_point(hom.values().to_vec(), &scale, cfg, |x| {
        for (xj, sj) in x.chunks(k).zip(src.chunks_mut(k)) {
            sj.copy_from_slice(&prob.nl.eval(xj));
        }
        green.apply_into(&src, nodes, &mut out);
        Ok(out.iter().zip(hom.values()).map(|(a, b)| a + b).collect())
    })?;
    let mut traj = WeightedTrajectory::from_values(grid, k, theta, v)?;
    // the boundary condition is exact by construction; pin it against rounding
    traj.at_mut(nodes - 1)[..n].copy_from_slice(&base[..n]);
    if !traj.is_finite() {
        return Err(Error::Divergence("non-finite backward trajectory".into()));
    }
    Ok((traj, report))
}

type CacheKey = Vec<u64>;

fn key_of(p: &[f64]) -> CacheKey {
    p.iter().map(|x| x.to_bits()).collect()
}

/// Graph map `p ↦ Q_N V(p, 0)` over `H_N` with memoized trajectories.
pub struct ManifoldChart {
    prob: SemilinearProblem,
    split: usize,
    theta: f64,
    cfg: SolverConfig,
    grid: TimeGrid,
    window: Option<f64>,
    trajectories: Mutex<HashMap<CacheKey, Arc<(WeightedTrajectory, FixedPointReport)>>>,
    jets: Mutex<HashMap<CacheKey, Jet>>,
}

impl std::fmt::Debug for ManifoldChart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifoldChart")
            .field("split", &self.split)
            .field("theta", &self.theta)
            .field("grid", &self.grid)
            .field("window", &self.window)
            .finish()
    }
}

impl ManifoldChart {
    /// Chart on the default half-line for this split.
    pub fn new(prob: SemilinearProblem, n: usize, theta: f64, cfg: SolverConfig) -> Result<Self> {
        check_gap_window(&prob, n, theta)?;
        let grid = TimeGrid::half_line(&prob.op, n, theta, &cfg)?;
        Self::with_grid(prob, n, theta, cfg, grid)
    }

    /// Chart on an explicit grid ending at `t = 0`.
    pub fn with_grid(prob: SemilinearProblem, n: usize, theta: f64, cfg: SolverConfig, grid: TimeGrid) -> Result<Self> {
        check_gap_window(&prob, n, theta)?;
        if grid.end().abs() > 1e-9 * grid.dt.max(1.0) {
            return Err(Error::Input(format!("chart grid must end at t = 0, ends at {}", grid.end())));
        }
        Ok(Self {
            prob,
            split: n,
            theta,
            cfg,
            grid,
            window: None,
            trajectories: Mutex::new(HashMap::new()),
            jets: Mutex::new(HashMap::new()),
        })
    }

    /// Restrict base points to `max |p_i| < β` (local problems).
    pub fn with_window(mut self, beta: f64) -> Self {
        self.window = Some(beta);
        self
    }

    pub fn problem(&self) -> &SemilinearProblem {
        &self.prob
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn window(&self) -> Option<f64> {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.prob.dim()
    }

    fn check_base(&self, p: &[f64]) -> Result<()> {
        check_dim("base point", p.len(), self.split)?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite base point".into()));
        }
        if let Some(beta) = self.window {
            let m = p.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if !(m < beta) {
                return Err(Error::Domain(format!("base point of size {m} outside the local window {beta}")));
            }
        }
        Ok(())
    }

    /// Backward trajectory through `p` (memoized; a race may compute twice,
    /// with identical results).
    pub fn trajectory(&self, p: &[f64]) -> Result<Arc<(WeightedTrajectory, FixedPointReport)>> {
        self.check_base(p)?;
        let key = key_of(p);
        if let Some(hit) = self.trajectories.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let solved = Arc::new(backward_fixed_point(&self.prob, self.split, self.theta, p, self.grid, &self.cfg)?);
        let mut cache = self.trajectories.lock().expect("cache poisoned");
        Ok(cache.entry(key).or_insert(solved).clone())
    }

    /// Seed the memo with a trajectory computed elsewhere (e.g. read back
    /// from a cache file). The trajectory must live on this chart's grid.
    pub fn preload(&self, p: &[f64], traj: WeightedTrajectory, report: FixedPointReport) -> Result<()> {
        self.check_base(p)?;
        if traj.grid != self.grid || traj.dim != self.dim() || traj.theta != self.theta {
            return Err(Error::Input("preloaded trajectory does not match the chart grid".into()));
        }
        self.trajectories.lock().expect("cache poisoned").insert(key_of(p), Arc::new((traj, report)));
        Ok(())
    }

    /// `M_N(p) = Q_N V(p, 0)` (length `K − N`).
    pub fn value(&self, p: &[f64]) -> Result<Vec<f64>> {
        let t = self.trajectory(p)?;
        Ok(t.0.last()[self.split..].to_vec())
    }

    /// `p + M_N(p)` as a full state.
    pub fn lift(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut u = p.to_vec();
        u.extend(self.value(p)?);
        Ok(u)
    }

    /// Solution `V′` of the equation of variations along `V(p, ·)` with
    /// boundary data `P_N ξ`, and the derivative `M′(p)ξ = Q_N V′(0)`.
    pub fn derivative(&self, p: &[f64], xi: &[f64]) -> Result<(WeightedTrajectory, Vec<f64>)> {
        check_dim("direction", xi.len(), self.split)?;
        let t = self.trajectory(p)?;
        let k = self.dim();
        let h = WeightedTrajectory::zeros(self.grid, k, self.theta);
        let bc = pad_base(xi, self.split, k)?;
        let (v, _) = variational_solve(&self.prob, &t.0, self.split, self.theta, &h, &bc, &self.cfg)?;
        let d = v.last()[self.split..].to_vec();
        Ok((v, d))
    }

    /// Attach a jet to a base point.
    pub fn attach_jet(&self, p: &[f64], jet: Jet) {
        self.jets.lock().expect("jet store poisoned").insert(key_of(p), jet);
    }

    pub fn jet_at(&self, p: &[f64]) -> Option<Jet> {
        self.jets.lock().expect("jet store poisoned").get(&key_of(p)).cloned()
    }

    /// Number of memoized trajectories.
    pub fn cached(&self) -> usize {
        self.trajectories.lock().expect("cache poisoned").len()
    }
}

/// `M_N(p)` for a one-off evaluation (no cache kept).
pub fn manifold_chart(prob: &SemilinearProblem, n: usize, theta: f64, p: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
    let grid = TimeGrid::half_line(&prob.op, n, theta, cfg)?;
    let (t, _) = backward_fixed_point(prob, n, theta, p, grid, cfg)?;
    Ok(t.last()[n..].to_vec())
}

/// `M′(p)ξ` for a one-off evaluation, with the variational trajectory.
pub fn first_derivative(
    prob: &SemilinearProblem,
    n: usize,
    theta: f64,
    p: &[f64],
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<(WeightedTrajectory, Vec<f64>)> {
    ManifoldChart::new(prob.clone(), n, theta, cfg.clone())?.derivative(&p[..n.min(p.len())], &xi[..n.min(xi.len())])
}

/// Largest ratio `‖M(p) − M(q)‖ / ‖p − q‖` over the pairs.
pub fn lipschitz_probe(chart: &ManifoldChart, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.len() < MIN_PROBE_PAIRS {
        return Err(Error::InsufficientSamples(format!(
            "{} pairs supplied, at least {MIN_PROBE_PAIRS} required",
            pairs.len()
        )));
    }
    let mut best = 0.0f64;
    for (p, q) in pairs {
        let d = norm(&sub(p, q));
        if d == 0.0 {
            continue;
        }
        let r = norm(&sub(&chart.value(p)?, &chart.value(q)?)) / d;
        best = best.max(r);
    }
    Ok(best)
}

/// Invariance check: flow `p + M(p)` forward for `time` and compare the high
/// part with the chart at the evolved base point.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceDefect {
    pub base: Vec<f64>,
    pub evolved_base: Vec<f64>,
    pub defect: f64,
}

pub fn invariance_defect(chart: &ManifoldChart, p: &[f64], time: f64) -> Result<InvarianceDefect> {
    let u0 = chart.lift(p)?;
    let n = chart.split();
    let opts = ForwardOptions { richardson: true, ..ForwardOptions::new(chart.grid().dt) };
    let traj = forward_solve(chart.problem(), &u0, time, opts)?;
    let end = traj.last();
    let evolved_base = end[..n].to_vec();
    let m = chart.value(&evolved_base)?;
    Ok(InvarianceDefect { base: p.to_vec(), evolved_base, defect: norm(&sub(&end[n..], &m)) })
}

/// Write rows `p-coordinates…, chart-coordinates…`.
pub fn export_chart_csv<W: Write>(chart: &ManifoldChart, points: &[Vec<f64>], mut w: W) -> Result<()> {
    let n = chart.split();
    let k = chart.dim();
    let header: Vec<String> =
        (1..=n).map(|i| format!("p{i}")).chain((n + 1..=k).map(|i| format!("m{i}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let m = chart.value(p)?;
        let row: Vec<String> = p.iter().chain(&m).map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Options for [`tracking_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingOptions {
    /// `T₊ = horizon_factor / θ`: the end of the rate-fit interval `[1, T₊]`.
    pub horizon_factor: f64,
    /// The window extends to `pad_factor·T₊` so the zero terminal data of the
    /// low modes does not pollute the fit.
    pub pad_factor: f64,
    /// Continuity order of the smoothstep cutoff `φ` (2 = quintic).
    pub cutoff_order: usize,
    /// Differences below this floor are ignored by the rate fit.
    pub fit_floor: f64,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self { horizon_factor: 15.0, pad_factor: 2.0, cutoff_order: 2, fit_floor: 1e-13 }
    }
}

/// Outcome of [`tracking_solve`].
#[derive(Debug, Clone, Serialize)]
pub struct TrackingReport {
    pub theta: f64,
    /// Decay rate of `‖u(t) − ū(t)‖` fitted on `[1, T₊]`; `+∞` when the
    /// difference is below the floor everywhere (trajectory on the manifold).
    pub fitted_rate: f64,
    /// Prefactor of the fit, `‖u − ū‖ ≈ C e^{−rate·t}`.
    #[serde(rename = "C")]
    pub constant: f64,
    /// Fit interval `[1, T₊]`.
    pub window: (f64, f64),
    pub degenerate: bool,
    pub fixed_point: FixedPointReport,
}

/// Tracking trajectory `ū = φu + v` on `[−T, pad·T₊]` with
/// `v = 𝒯(F(φu + v) − φF(u) − φ′u)`; `u` is the forward solution from `u0`.
///
/// `ū` solves the equation, coincides with a backward manifold trajectory for
/// `t ≤ 0`, and `u − ū = −v` decays like `e^{−θt}` for `t ≥ 1`.
pub fn tracking_solve(
    prob: &SemilinearProblem,
    n: usize,
    theta: f64,
    u0: &[f64],
    cfg: &SolverConfig,
    opts: &TrackingOptions,
) -> Result<(WeightedTrajectory, WeightedTrajectory, TrackingReport)> {
    check_gap_window(prob, n, theta)?;
    let k = prob.dim();
    check_dim("initial data", u0.len(), k)?;
    let t_plus = opts.horizon_factor / theta;
    if !(t_plus > 1.0) {
        return Err(Error::Input(format!("tracking horizon T₊ = {t_plus} must exceed 1")));
    }
    let back = cfg.horizon_for(&prob.op, n, theta);
    let dt0 = cfg.step_for(&prob.op);
    let m_back = (back / dt0).ceil() as usize;
    let dt = back / m_back as f64;
    let m_fwd = ((opts.pad_factor * t_plus) / dt).ceil() as usize;
    let grid = TimeGrid { t0: -(m_back as f64) * dt, dt, nodes: m_back + m_fwd + 1 };
    // forward solution aligned with the nonnegative nodes
    let fwd = forward_solve(prob, u0, (m_fwd as f64 - 1e-9) * dt, ForwardOptions::new(dt))?;
    if fwd.nodes() != m_fwd + 1 {
        return Err(Error::Input("forward grid misaligned with the tracking window".into()));
    }
    let phi = Smoothstep::new(opts.cutoff_order);
    let nodes = grid.nodes;
    let mut fu = vec![0.0; nodes * k]; // φF(u) + φ′u on t ≥ 0
    let mut phi_u = vec![0.0; nodes * k];
    for j in 0..=m_fwd {
        let t = j as f64 * dt;
        let d = phi.derivatives(t, 1);
        let uj = fwd.at(j);
        let f = prob.nl.eval(uj);
        let row = (m_back + j) * k;
        for i in 0..k {
            fu[row + i] = d[0] * f[i] + d[1] * uj[i];
            phi_u[row + i] = d[0] * uj[i];
        }
    }
    let green = GreenOperator::new(&prob.op, n, dt);
    // Convergence is monitored with the weight frozen past T₊: the padding
    // only shields the fit window, and the e^{θt} weight out there would
    // otherwise amplify round-off in u − ū above the stopping tolerance.
    let cap = (m_back + ((t_plus / dt).floor() as usize)) * k;
    let mut scale = weighted_scale(&grid, k, theta);
    let frozen = scale[cap.min(scale.len() - 1)];
    let from = cap.min(scale.len());
    scale[from..].iter_mut().for_each(|s| *s = frozen);
    let mut src = vec![0.0; nodes * k];
    let mut out = vec![0.0; nodes * k];
    let mut state = vec![0.0; k];
    let (v, report) = fixed_point(vec![0.0; nodes * k], &scale, cfg, |x| {
        for j in 0..nodes {
            let r = j * k;
            for i in 0..k {
                state[i] = phi_u[r + i] + x[r + i];
            }
            let f = prob.nl.eval(&state);
            for i in 0..k {
                src[r + i] = f[i] - fu[r + i];
            }
        }
        green.apply_into(&src, nodes, &mut out);
        Ok(out.clone())
    })?;
    let tracked: Vec<f64> = v.iter().zip(&phi_u).map(|(a, b)| a + b).collect();
    let tracked = WeightedTrajectory::from_values(grid, k, theta, tracked)?;
    let forward = fwd.with_theta(theta);
    let mut pts = Vec::new();
    for j in 0..=m_fwd {
        let t = j as f64 * dt;
        if t < 1.0 || t > t_plus {
            continue;
        }
        let diff = norm(&v[(m_back + j) * k..(m_back + j + 1) * k]);
        if diff >= opts.fit_floor {
            pts.push((t, diff.ln()));
        }
    }
    let (fitted_rate, constant, degenerate) = match linear_fit(&pts) {
        Some((slope, icpt)) if pts.len() >= 2 => (-slope, icpt.exp(), false),
        _ => (f64::INFINITY, 0.0, true),
    };
    let rep = TrackingReport { theta, fitted_rate, constant, window: (1.0, t_plus), degenerate, fixed_point: report };
    Ok((tracked, forward, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{sell_constants, SellModel, SellParams};
    use crate::parasolve::Nonlinearity;
    use crate::spectral::SpectralOperator;

    struct Zero(usize);
    impl Nonlinearity for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval(&self, _u: &[f64]) -> Vec<f64> {
            vec![0.0; self.0]
        }
        fn jacobian(&self, _u: &[f64]) -> Vec<f64> {
            vec![0.0; self.0 * self.0]
        }
        fn lipschitz(&self) -> f64 {
            0.0
        }
    }

    struct Constant(Vec<f64>);
    impl Nonlinearity for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, _u: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
        fn jacobian(&self, _u: &[f64]) -> Vec<f64> {
            vec![0.0; self.0.len() * self.0.len()]
        }
        fn lipschitz(&self) -> f64 {
            0.0
        }
    }

    fn squares_problem(nl: Arc<dyn Nonlinearity>) -> SemilinearProblem {
        SemilinearProblem::new(SpectralOperator::squares(1.0, nl.dim()).unwrap(), nl).unwrap()
    }

    #[test]
    fn zero_nonlinearity_gives_flat_chart() {
        let prob = squares_problem(Arc::new(Zero(4)));
        let chart = ManifoldChart::new(prob, 2, 6.5, SolverConfig::default()).unwrap();
        assert_eq!(chart.value(&[0.3, -0.2]).unwrap(), vec![0.0, 0.0]);
        let (_, d) = chart.derivative(&[0.3, -0.2], &[1.0, 0.5]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        let t = chart.trajectory(&[0.3, -0.2]).unwrap();
        let j = t.0.grid.index_at_or_after(-1.0);
        let tj = t.0.grid.time(j);
        assert!((t.0.at(j)[0] - 0.3 * (-tj).exp()).abs() < 1e-12);
    }

    #[test]
    fn constant_forcing_chart_is_inverse_of_operator() {
        let g = vec![1.0, -2.0, 3.0, 0.5];
        let prob = squares_problem(Arc::new(Constant(g.clone())));
        let m = manifold_chart(&prob, 2, 6.5, &[0.1, 0.2], &SolverConfig::default()).unwrap();
        assert!((m[0] - 3.0 / 9.0).abs() < 1e-6, "{m:?}");
        assert!((m[1] - 0.5 / 16.0).abs() < 1e-6);
    }

    #[test]
    fn sell_chart_matches_closed_form() {
        let model = SellModel::new(SellParams::default()).unwrap();
        let chart = ManifoldChart::new(model.problem.clone(), 1, 1.5, SolverConfig::default()).unwrap().with_window(0.2);
        let m = chart.value(&[0.1]).unwrap();
        let c = sell_constants(2).unwrap();
        assert!((m[0] - c[1] * 0.01 * 10f64.ln()).abs() < 1e-5, "{}", m[0]);
        assert!((m[1] - c[2] * 1e-4 * 10f64.ln().powi(3)).abs() < 1e-5, "{}", m[1]);
        assert!(matches!(chart.value(&[0.3]), Err(Error::Domain(_))));
        // determinism and caching
        let again = chart.value(&[0.1]).unwrap();
        assert_eq!(m, again);
        assert_eq!(chart.cached(), 1);
    }

    #[test]
    fn lipschitz_probe_needs_pairs() {
        let prob = squares_problem(Arc::new(Zero(3)));
        let chart = ManifoldChart::new(prob, 1, 2.5, SolverConfig::default()).unwrap();
        let pairs: Vec<_> = (0..50).map(|i| (vec![0.01 * i as f64], vec![0.01 * i as f64 + 0.1])).collect();
        assert_eq!(lipschitz_probe(&chart, &pairs).unwrap(), 0.0);
        assert!(matches!(lipschitz_probe(&chart, &pairs[..10]), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn gap_window_enforced() {
        let prob = squares_problem(Arc::new(Zero(3)));
        assert!(matches!(
            ManifoldChart::new(prob, 1, 4.5, SolverConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn tracking_on_linear_problem_decays_at_high_rate() {
        let prob = squares_problem(Arc::new(Zero(4)));
        let (_, _, rep) =
            tracking_solve(&prob, 2, 6.5, &[1.0, 0.5, 0.3, -0.2], &SolverConfig::default(), &TrackingOptions::default())
                .unwrap();
        // the difference is the high-mode part, decaying like e^{−9t}
        assert!((rep.fitted_rate - 9.0).abs() < 0.05, "{rep:?}");
    }
}
