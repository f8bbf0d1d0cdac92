//! Time integration for `∂t u + Au = F(u)` with diagonal `A`.
//!
//! Everything lives on uniform grids. The Green operator of
//! `∂t v + Av = h` in the exponentially weighted space splits by mode: modes
//! `n ≤ N` are integrated backward from the window end with zero terminal
//! data, modes `n > N` forward from the window start with zero initial data.
//! Within a step the source is taken linear in time and the exponential is
//! integrated exactly (exponential trapezoid rule), so the scheme is second
//! order and unconditionally stable. The backward recurrence is the exact
//! algebraic inverse of the forward one.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::jetcalc::{lattice_points, SymMultiForm};
use crate::numerics::{factorial, norm};
use crate::spectral::{GapLadder, SpectralOperator};

/// Smooth nonlinearity `F : R^K → R^K`.
///
/// Higher derivatives are exposed through truncated Taylor series along
/// polynomial curves, which is all the jet recursion needs and is exact for
/// the shipped models.
pub trait Nonlinearity: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, u: &[f64]) -> Vec<f64>;

    /// Dense Jacobian, row-major `K × K`. Default: central differences.
    fn jacobian(&self, u: &[f64]) -> Vec<f64> {
        let k = self.dim();
        let mut jac = vec![0.0; k * k];
        let mut x = u.to_vec();
        for i in 0..k {
            let h = 1e-6 * (1.0 + u[i].abs());
            x[i] = u[i] + h;
            let fp = self.eval(&x);
            x[i] = u[i] - h;
            let fm = self.eval(&x);
            x[i] = u[i];
            for r in 0..k {
                jac[r * k + i] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac
    }

    /// Taylor coefficients (degrees `0..x.len()`) of `s ↦ F(Σ_i s^i x_i)`.
    fn series(&self, _x: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        None
    }

    /// Taylor coefficients of `s ↦ F′(X(s)) D(s)` with `X(s) = Σ s^i x_i`,
    /// `D(s) = Σ s^i d_i`, up to degree `x.len() − 1`. Default: derived
    /// from [`Nonlinearity::series`] by a central difference in the
    /// direction `D`.
    fn series_linearized(&self, x: &[Vec<f64>], d: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let scale = d.iter().map(|v| norm(v)).fold(0.0, f64::max);
        if scale == 0.0 {
            return Some(vec![vec![0.0; self.dim()]; x.len()]);
        }
        let eps = 1e-6 / scale;
        let shift = |s: f64| -> Vec<Vec<f64>> {
            x.iter().zip(d).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + s * q).collect()).collect()
        };
        let fp = self.series(&shift(eps))?;
        let fm = self.series(&shift(-eps))?;
        Some(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) / (2.0 * eps)).collect())
                .collect(),
        )
    }

    /// Whether `P_N F(u)` depends on `P_N u` only (lower-triangular coupling,
    /// as in a cascade). Reduced systems over the first `N` modes may then
    /// skip evaluating the graph of the high modes.
    fn low_modes_closed(&self, _n: usize) -> bool {
        false
    }

    /// Certified (or nominal, for local models) bound on `‖F′‖`.
    fn lipschitz(&self) -> f64;
}

/// Homogeneous derivative form `F⁽ᵏ⁾(u)` recovered from the series
/// interface on lattice points.
pub fn derivative_form(nl: &dyn Nonlinearity, u: &[f64], k: usize) -> Result<SymMultiForm> {
    let dim = nl.dim();
    check_dim("base point", u.len(), dim)?;
    if k == 0 {
        return Ok(SymMultiForm::constant(dim, &nl.eval(u)));
    }
    let points = lattice_points(dim, k);
    let mut values = Vec::with_capacity(points.len());
    for xi in &points {
        let mut curve = vec![u.to_vec(), xi.clone()];
        curve.extend((2..=k).map(|_| vec![0.0; dim]));
        let s = nl
            .series(&curve)
            .ok_or_else(|| Error::Capability("nonlinearity provides no Taylor series".into()))?;
        values.push(s[k].iter().map(|c| c * factorial(k)).collect::<Vec<_>>());
    }
    SymMultiForm::fit_homogeneous(k, dim, &points, &values)
}

/// `∂t u + Au = F(u)` with a certified Lipschitz bound.
#[derive(Clone)]
pub struct SemilinearProblem {
    pub op: SpectralOperator,
    pub nl: Arc<dyn Nonlinearity>,
    pub lipschitz: f64,
}

impl std::fmt::Debug for SemilinearProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemilinearProblem")
            .field("op", &self.op)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl SemilinearProblem {
    pub fn new(op: SpectralOperator, nl: Arc<dyn Nonlinearity>) -> Result<Self> {
        check_dim("nonlinearity", nl.dim(), op.dim())?;
        let lipschitz = nl.lipschitz();
        Ok(Self { op, nl, lipschitz })
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Self {
        self.lipschitz = lipschitz;
        self
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// `−Au + F(u)`.
    pub fn rhs(&self, u: &[f64]) -> Vec<f64> {
        let f = self.nl.eval(u);
        u.iter().zip(self.op.eigenvalues()).zip(f).map(|((x, l), fx)| fx - l * x).collect()
    }
}

/// Numerical parameters shared by all solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Target for the half-line truncation: `e^{−gap·T} ≤ 0.01·tolerance`.
    pub tolerance: f64,
    /// Relative weighted-norm increment that stops fixed-point loops.
    pub fixed_point_tol: f64,
    pub max_iterations: usize,
    pub anderson_depth: usize,
    /// Observed contraction ratio above which Anderson mixing is switched on.
    pub anderson_threshold: f64,
    /// `Δt = dt_factor / λ_K`.
    pub dt_factor: f64,
    /// Upper bound on `λ_N·T` (keeps `e^{λ_N T}` finite).
    pub max_decay_exponent: f64,
    /// Explicit overrides.
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            fixed_point_tol: 1e-12,
            max_iterations: 3000,
            anderson_depth: 3,
            anderson_threshold: 0.9,
            dt_factor: 0.25,
            max_decay_exponent: 600.0,
            horizon: None,
            dt: None,
        }
    }
}

impl SolverConfig {
    /// Half-line length for the split at `N` with exponent `θ`.
    pub fn horizon_for(&self, op: &SpectralOperator, n: usize, theta: f64) -> f64 {
        if let Some(t) = self.horizon {
            return t;
        }
        let gap = (theta - op.eigenvalue(n)).min(op.eigenvalue(n + 1) - theta);
        let t = (100.0 / self.tolerance).ln() / gap;
        t.min(self.max_decay_exponent / op.eigenvalue(n))
    }

    pub fn step_for(&self, op: &SpectralOperator) -> f64 {
        self.dt.unwrap_or(self.dt_factor / op.eigenvalue(op.dim()))
    }
}

/// Uniform grid `t_j = t0 + j·dt`, `j = 0 … nodes−1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub nodes: usize,
}

impl TimeGrid {
    /// Grid on `[start, end]` with step at most `max_dt`.
    pub fn spanning(start: f64, end: f64, max_dt: f64) -> Result<Self> {
        if !(end > start) || !(max_dt > 0.0) {
            return Err(Error::Input(format!("invalid grid [{start}, {end}] with step {max_dt}")));
        }
        let steps = ((end - start) / max_dt).ceil().max(1.0) as usize;
        Ok(Self { t0: start, dt: (end - start) / steps as f64, nodes: steps + 1 })
    }

    /// `[−T, 0]` for a single split.
    pub fn half_line(op: &SpectralOperator, n: usize, theta: f64, cfg: &SolverConfig) -> Result<Self> {
        let t = cfg.horizon_for(op, n, theta);
        Self::spanning(-t, 0.0, cfg.step_for(op))
    }

    /// `[−T, 0]` long enough for every level of a ladder.
    pub fn for_ladder(op: &SpectralOperator, ladder: &GapLadder, cfg: &SolverConfig) -> Result<Self> {
        let t = ladder_horizons(op, ladder, cfg).into_iter().fold(0.0, f64::max);
        Self::spanning(-t, 0.0, cfg.step_for(op))
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.nodes - 1)
    }

    /// Index of the first node at or after `t`.
    pub fn index_at_or_after(&self, t: f64) -> usize {
        (((t - self.t0) / self.dt - 1e-9).ceil().max(0.0) as usize).min(self.nodes - 1)
    }

    /// Trapezoid weights of `∫ e^{2θt}(·) dt`.
    pub fn l2_weights(&self, theta: f64) -> Vec<f64> {
        (0..self.nodes)
            .map(|j| {
                let end = j == 0 || j + 1 == self.nodes;
                self.dt * if end { 0.5 } else { 1.0 } * (2.0 * theta * self.time(j)).exp()
            })
            .collect()
    }
}

/// Per-level half-line lengths, nonincreasing along the ladder so that every
/// level's window is a suffix of the previous one.
pub fn ladder_horizons(op: &SpectralOperator, ladder: &GapLadder, cfg: &SolverConfig) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(ladder.len());
    for k in 1..=ladder.len() {
        let t = cfg.horizon_for(op, ladder.dim(k), ladder.theta(k));
        out.push(match out.last() {
            Some(prev) => t.min(*prev),
            None => t,
        });
    }
    out
}

/// Time-sampled path with a weight exponent `θ`; values are node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTrajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    pub theta: f64,
    values: Vec<f64>,
}

const CACHE_MAGIC: &[u8; 8] = b"IMJTRAJ1";

impl WeightedTrajectory {
    pub fn zeros(grid: TimeGrid, dim: usize, theta: f64) -> Self {
        Self { grid, dim, theta, values: vec![0.0; grid.nodes * dim] }
    }

    pub fn from_values(grid: TimeGrid, dim: usize, theta: f64, values: Vec<f64>) -> Result<Self> {
        check_dim("trajectory values", values.len(), grid.nodes * dim)?;
        Ok(Self { grid, dim, theta, values })
    }

    pub fn from_fn<F: FnMut(f64) -> Vec<f64>>(grid: TimeGrid, dim: usize, theta: f64, mut f: F) -> Self {
        let mut values = Vec::with_capacity(grid.nodes * dim);
        for j in 0..grid.nodes {
            values.extend(f(grid.time(j)));
        }
        Self { grid, dim, theta, values }
    }

    pub fn nodes(&self) -> usize {
        self.grid.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn at_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.nodes() - 1)
    }

    pub fn first(&self) -> &[f64] {
        self.at(0)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    /// Restriction to nodes `start..`.
    pub fn suffix(&self, start: usize) -> Self {
        let grid = TimeGrid { t0: self.grid.time(start), dt: self.grid.dt, nodes: self.grid.nodes - start };
        Self { grid, dim: self.dim, theta: self.theta, values: self.values[start * self.dim..].to_vec() }
    }

    /// Restriction to the last `nodes` nodes.
    pub fn tail(&self, nodes: usize) -> Self {
        self.suffix(self.nodes() - nodes)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|a| *a *= s);
        out
    }

    /// `sup_j e^{θ t_j} ‖u_j‖`.
    pub fn weighted_sup(&self) -> f64 {
        (0..self.nodes())
            .map(|j| (self.theta * self.grid.time(j)).exp() * norm(self.at(j)))
            .fold(0.0, f64::max)
    }

    /// Trapezoid rule for `(∫ e^{2θt}‖u‖² dt)^{1/2}`.
    pub fn weighted_l2(&self) -> f64 {
        let w = self.grid.l2_weights(self.theta);
        (0..self.nodes())
            .map(|j| w[j] * self.at(j).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim).map(|k| format!("u{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for j in 0..self.nodes() {
            let row: Vec<String> = std::iter::once(format!("{:.17e}", self.grid.time(j)))
                .chain(self.at(j).iter().map(|v| format!("{v:.17e}")))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Binary cache: magic, `K` (u64), `M` (u64 node count), `θ`, `T`
    /// (`= −t0`), `dt`, then row-major little-endian doubles.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(48 + 8 * self.values.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.nodes() as u64).to_le_bytes());
        buf.extend_from_slice(&self.theta.to_le_bytes());
        buf.extend_from_slice(&(-self.grid.t0).to_le_bytes());
        buf.extend_from_slice(&self.grid.dt.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        if buf.len() < 48 || &buf[..8] != CACHE_MAGIC {
            return Err(Error::Io(format!("{}: not a trajectory cache", path.display())));
        }
        let u = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let d = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let (dim, nodes) = (u(8) as usize, u(16) as usize);
        let (theta, t, dt) = (d(24), d(32), d(40));
        if buf.len() != 48 + 8 * dim * nodes {
            return Err(Error::Io(format!("{}: truncated trajectory cache", path.display())));
        }
        let values = (0..dim * nodes).map(|i| d(48 + 8 * i)).collect();
        Ok(Self { grid: TimeGrid { t0: -t, dt, nodes }, dim, theta, values })
    }
}

/// Exponential-trapezoid weights. With `z = λΔ` and the source linear on
/// the step, the forward update is
/// `v₊ = e^{−z}v + Δ(fwd0·h + fwd1·h₊)`, and its inverse
/// `v = e^{z}v₊ − Δ(bwd0·h + bwd1·h₊)`.
#[derive(Debug, Clone, Copy)]
pub struct StepWeights {
    pub decay: f64,
    pub fwd0: f64,
    pub fwd1: f64,
    pub grow: f64,
    pub bwd0: f64,
    pub bwd1: f64,
}

/// `((x−1)eˣ + 1)/x²`
fn g2(x: f64) -> f64 {
    if x.abs() < 0.1 {
        (0..14).map(|m| x.powi(m) * (m as f64 + 1.0) / factorial(m as usize + 2)).sum()
    } else {
        ((x - 1.0) * x.exp() + 1.0) / (x * x)
    }
}

/// `(eˣ − 1 − x)/x²`
fn g1(x: f64) -> f64 {
    if x.abs() < 0.1 {
        (0..14).map(|m| x.powi(m) / factorial(m as usize + 2)).sum()
    } else {
        (x.exp() - 1.0 - x) / (x * x)
    }
}

impl StepWeights {
    pub fn new(lambda: f64, dt: f64) -> Self {
        let z = lambda * dt;
        Self {
            decay: (-z).exp(),
            fwd0: g2(-z),
            fwd1: g1(-z),
            grow: z.exp(),
            bwd0: g1(z),
            bwd1: g2(z),
        }
    }
}

/// Discrete Green operator of `∂t v + Av = h` split at `N`.
#[derive(Debug, Clone)]
pub struct GreenOperator {
    split: usize,
    dt: f64,
    weights: Vec<StepWeights>,
}

impl GreenOperator {
    pub fn new(op: &SpectralOperator, split: usize, dt: f64) -> Self {
        let weights = op.eigenvalues().iter().map(|&l| StepWeights::new(l, dt)).collect();
        Self { split, dt, weights }
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `v = 𝒯h` for node-major `h` with `nodes` nodes; `out` is overwritten.
    pub fn apply_into(&self, h: &[f64], nodes: usize, out: &mut [f64]) {
        let k = self.dim();
        let dt = self.dt;
        for (n, w) in self.weights.iter().enumerate() {
            if n < self.split {
                out[(nodes - 1) * k + n] = 0.0;
                for j in (0..nodes - 1).rev() {
                    out[j * k + n] =
                        w.grow * out[(j + 1) * k + n] - dt * (w.bwd0 * h[j * k + n] + w.bwd1 * h[(j + 1) * k + n]);
                }
            } else {
                out[n] = 0.0;
                for j in 0..nodes - 1 {
                    out[(j + 1) * k + n] =
                        w.decay * out[j * k + n] + dt * (w.fwd0 * h[j * k + n] + w.fwd1 * h[(j + 1) * k + n]);
                }
            }
        }
    }

    pub fn apply(&self, h: &WeightedTrajectory) -> WeightedTrajectory {
        let mut out = WeightedTrajectory::zeros(h.grid, h.dim, h.theta);
        self.apply_into(h.values(), h.nodes(), out.values_mut());
        out
    }

    /// Exact transpose of [`Self::apply_into`] in the Euclidean pairing of
    /// nodal values.
    pub fn apply_transpose_into(&self, g: &[f64], nodes: usize, out: &mut [f64]) {
        let k = self.dim();
        let dt = self.dt;
        let mut q = vec![0.0; nodes];
        for (n, w) in self.weights.iter().enumerate() {
            if n < self.split {
                // r_k = g_k + e^{z} r_{k−1}
                q[0] = g[n];
                for j in 1..nodes {
                    q[j] = g[j * k + n] + w.grow * q[j - 1];
                }
                for m in 0..nodes {
                    let mut v = 0.0;
                    if m + 1 < nodes {
                        v -= dt * w.bwd0 * q[m];
                    }
                    if m >= 1 {
                        v -= dt * w.bwd1 * q[m - 1];
                    }
                    out[m * k + n] = v;
                }
            } else {
                // q_k = g_{k+1} + e^{−z} q_{k+1}
                q[nodes - 1] = 0.0;
                if nodes >= 2 {
                    q[nodes - 2] = g[(nodes - 1) * k + n];
                    for j in (0..nodes - 2).rev() {
                        q[j] = g[(j + 1) * k + n] + w.decay * q[j + 1];
                    }
                }
                for m in 0..nodes {
                    let mut v = 0.0;
                    if m + 1 < nodes {
                        v += dt * w.fwd0 * q[m];
                    }
                    if m >= 1 {
                        v += dt * w.fwd1 * q[m - 1];
                    }
                    out[m * k + n] = v;
                }
            }
        }
    }
}

fn check_split_window(op: &SpectralOperator, n: usize, theta: f64) -> Result<()> {
    if n == 0 || n >= op.dim() {
        return Err(Error::Input(format!("split index {n} outside 1..{}", op.dim())));
    }
    if !(theta > op.eigenvalue(n) && theta < op.eigenvalue(n + 1)) {
        return Err(Error::Precondition(format!(
            "θ = {theta} outside ({}, {})",
            op.eigenvalue(n),
            op.eigenvalue(n + 1)
        )));
    }
    Ok(())
}

/// `𝒯h`: the weighted-space solution of `∂t v + Av = h`.
pub fn green_apply(op: &SpectralOperator, n: usize, theta: f64, h: &WeightedTrajectory) -> Result<WeightedTrajectory> {
    check_split_window(op, n, theta)?;
    check_dim("source", h.dim, op.dim())?;
    Ok(GreenOperator::new(op, n, h.grid.dt).apply(h).with_theta(theta))
}

/// `ℋ(p, t) = Σ_{n ≤ N} p_n e^{−λ_n t}` sampled on `grid`.
pub fn homog_apply(op: &SpectralOperator, n: usize, p: &[f64], grid: TimeGrid, theta: f64) -> Result<WeightedTrajectory> {
    check_dim("boundary data", p.len(), op.dim())?;
    let low = norm(&p[..n.min(p.len())]);
    let high = norm(&p[n.min(p.len())..]);
    if high > 1e-12 * low.max(1.0) {
        return Err(Error::Precondition(format!("boundary data has high-mode content {high:e}")));
    }
    let lam = op.eigenvalues();
    Ok(WeightedTrajectory::from_fn(grid, op.dim(), theta, |t| {
        (0..p.len()).map(|i| if i < n { p[i] * (-lam[i] * t).exp() } else { 0.0 }).collect()
    }))
}

/// Outcome of a fixed-point loop.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// Successive increment ratios `‖x_{k+1}−x_k‖/‖x_k−x_{k−1}‖`.
    pub ratios: Vec<f64>,
    /// Geometric mean of the plain-iteration ratios (the observed contraction).
    pub contraction: f64,
    pub final_increment: f64,
    pub anderson: bool,
}

/// Iterate `x ← G(x)` to a relative weighted increment below `tol`.
///
/// `scale` holds one weight per entry; all norms and the Anderson
/// least-squares problem live in the scaled coordinates. Anderson mixing of
/// depth `cfg.anderson_depth` is switched on once the observed ratio exceeds
/// `cfg.anderson_threshold`.
pub fn fixed_point<G>(x0: Vec<f64>, scale: &[f64], cfg: &SolverConfig, mut map: G) -> Result<(Vec<f64>, FixedPointReport)>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let wnorm = |v: &[f64]| v.iter().zip(scale).map(|(a, s)| (a * s).powi(2)).sum::<f64>().sqrt();
    let mut report = FixedPointReport::default();
    let mut x = x0;
    let mut prev_inc: Option<f64> = None;
    let mut first_inc = None;
    let mut hist_x: Vec<Vec<f64>> = Vec::new(); // G(x_k)
    let mut hist_f: Vec<Vec<f64>> = Vec::new(); // G(x_k) − x_k
    let mut plain_ratios = Vec::new();
    for it in 0..cfg.max_iterations {
        let gx = map(&x)?;
        let f: Vec<f64> = gx.iter().zip(&x).map(|(a, b)| a - b).collect();
        let inc = wnorm(&f);
        if !inc.is_finite() {
            return Err(Error::Divergence(format!("non-finite iterate at step {it}")));
        }
        let size = wnorm(&gx).max(f64::MIN_POSITIVE);
        report.iterations = it + 1;
        report.final_increment = inc / size;
        if let Some(p) = prev_inc {
            if p > 0.0 {
                let r = inc / p;
                report.ratios.push(r);
                if !report.anderson {
                    plain_ratios.push(r);
                    if plain_ratios.len() >= 2
                        && r > cfg.anderson_threshold
                        && plain_ratios[plain_ratios.len() - 2] > cfg.anderson_threshold
                        && cfg.anderson_depth > 0
                    {
                        report.anderson = true;
                    }
                }
            }
        }
        let first = *first_inc.get_or_insert(inc);
        if inc <= cfg.fixed_point_tol * size || inc == 0.0 {
            report.contraction = geometric_mean(&plain_ratios);
            return Ok((gx, report));
        }
        if inc > 1e8 * first.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence(format!("increments grew by 1e8 after {it} steps")));
        }
        prev_inc = Some(inc);
        if report.anderson {
            hist_x.push(gx.clone());
            hist_f.push(f.clone());
            if hist_x.len() > cfg.anderson_depth + 1 {
                hist_x.remove(0);
                hist_f.remove(0);
            }
            x = anderson_step(&hist_x, &hist_f, scale).unwrap_or(gx);
        } else {
            x = gx;
        }
    }
    report.contraction = geometric_mean(&plain_ratios);
    Err(Error::Divergence(format!(
        "no convergence in {} iterations (relative increment {:e}, ratio {:.3})",
        cfg.max_iterations, report.final_increment, report.contraction
    )))
}

fn geometric_mean(r: &[f64]) -> f64 {
    let v: Vec<f64> = r.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Type-II Anderson update from histories of `G(x_k)` and residuals.
fn anderson_step(gs: &[Vec<f64>], fs: &[Vec<f64>], scale: &[f64]) -> Option<Vec<f64>> {
    let m = fs.len();
    if m < 2 {
        return None;
    }
    let len = fs[0].len();
    let cols = m - 1;
    let df = DMatrix::from_fn(len, cols, |i, c| (fs[c + 1][i] - fs[c][i]) * scale[i]);
    let rhs = DVector::from_fn(len, |i, _| fs[m - 1][i] * scale[i]);
    let gamma = df.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut x = gs[m - 1].clone();
    for c in 0..cols {
        let g = gamma[c];
        if !g.is_finite() {
            return None;
        }
        for (i, xi) in x.iter_mut().enumerate() {
            *xi -= g * (gs[c + 1][i] - gs[c][i]);
        }
    }
    Some(x)
}

/// Per-entry scaling `sqrt(ω_j)` of the discrete weighted L² norm.
pub fn weighted_scale(grid: &TimeGrid, dim: usize, theta: f64) -> Vec<f64> {
    let w = grid.l2_weights(theta);
    w.iter().flat_map(|wj| std::iter::repeat_n(wj.sqrt(), dim)).collect()
}

/// Power-iteration estimate of `‖𝒯‖` in the discrete weighted L² space.
#[derive(Debug, Clone, Serialize)]
pub struct NormEstimate {
    pub estimate: f64,
    pub formula: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `‖𝒯‖` on `[−T, 0]` by power iteration on `BᵀB`, `B = D^{1/2} 𝒯 D^{−1/2}`,
/// best of `trials` deterministic starts.
pub fn operator_norm_estimate(op: &SpectralOperator, n: usize, theta: f64, trials: usize, cfg: &SolverConfig) -> Result<NormEstimate> {
    check_split_window(op, n, theta)?;
    let grid = TimeGrid::half_line(op, n, theta, cfg)?;
    let k = op.dim();
    let green = GreenOperator::new(op, n, grid.dt);
    let s = weighted_scale(&grid, k, theta);
    let len = s.len();
    let nodes = grid.nodes;
    let apply_b = |x: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        for i in 0..len {
            tmp[i] = x[i] / s[i];
        }
        green.apply_into(tmp, nodes, out);
        for i in 0..len {
            out[i] *= s[i];
        }
    };
    let apply_bt = |x: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        for i in 0..len {
            tmp[i] = x[i] * s[i];
        }
        green.apply_transpose_into(tmp, nodes, out);
        for i in 0..len {
            out[i] /= s[i];
        }
    };
    let mut best = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut tmp = vec![0.0; len];
    let mut y = vec![0.0; len];
    for trial in 0..trials.max(1) {
        // deterministic, smooth-ish start concentrated on a single trial-dependent mode mix
        let mut x: Vec<f64> = (0..len)
            .map(|i| {
                let (j, m) = (i / k, i % k);
                1.0 + 0.5 * ((j as f64 * 0.01 + m as f64 * 1.3 + trial as f64 * 0.7).sin())
            })
            .collect();
        let mut sigma = 0.0;
        for it in 0..200 {
            let nx = norm(&x);
            x.iter_mut().for_each(|v| *v /= nx);
            apply_b(&x, &mut y, &mut tmp);
            let sig_new = norm(&y);
            let mut z = vec![0.0; len];
            apply_bt(&y, &mut z, &mut tmp);
            x = z;
            iterations = iterations.max(it + 1);
            if (sig_new - sigma).abs() <= 1e-7 * sig_new {
                sigma = sig_new;
                converged = true;
                break;
            }
            sigma = sig_new;
        }
        best = best.max(sigma);
    }
    Ok(NormEstimate { estimate: best, formula: op.green_norm(n, theta), iterations, converged })
}

/// Cached nodewise Jacobians `F′(u(t_j))` of a base trajectory.
#[derive(Debug, Clone)]
pub struct Linearization {
    dim: usize,
    jac: Vec<f64>,
}

impl Linearization {
    pub fn new(prob: &SemilinearProblem, base: &WeightedTrajectory) -> Self {
        let k = prob.dim();
        let mut jac = Vec::with_capacity(base.nodes() * k * k);
        for j in 0..base.nodes() {
            jac.extend(prob.nl.jacobian(base.at(j)));
        }
        Self { dim: k, jac }
    }

    pub fn nodes(&self) -> usize {
        self.jac.len() / (self.dim * self.dim)
    }

    /// Restrict to the last `nodes` nodes.
    pub fn tail(&self, nodes: usize) -> Self {
        let kk = self.dim * self.dim;
        Self { dim: self.dim, jac: self.jac[(self.nodes() - nodes) * kk..].to_vec() }
    }

    /// `out_j = F′(u_j) v_j` for node-major `v`.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let k = self.dim;
        for (j, (vj, oj)) in v.chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let jm = &self.jac[j * k * k..(j + 1) * k * k];
            for r in 0..k {
                oj[r] = jm[r * k..(r + 1) * k].iter().zip(vj).map(|(a, b)| a * b).sum();
            }
        }
    }
}

/// Solve `∂t v + Av − F′(u)v = h`, `P_N v(0) = P_N p` in the weighted space
/// by the fixed point `v ← 𝒯(F′(u)v + h) + ℋp`.
pub fn variational_solve(
    prob: &SemilinearProblem,
    base: &WeightedTrajectory,
    n: usize,
    theta: f64,
    h: &WeightedTrajectory,
    p: &[f64],
    cfg: &SolverConfig,
) -> Result<(WeightedTrajectory, FixedPointReport)> {
    let (lo, hi) = prob.op.theta_window(n, prob.lipschitz);
    if !(theta > lo && theta < hi) {
        return Err(Error::Precondition(format!("θ = {theta} outside the gap window ({lo}, {hi})")));
    }
    let lin = Linearization::new(prob, base);
    variational_solve_linearized(&prob.op, &lin, n, theta, h, p, cfg)
}

/// [`variational_solve`] with a precomputed linearization (must share the
/// grid of `h`). Only the split's `θ ∈ (λ_N, λ_{N+1})` is checked here.
pub fn variational_solve_linearized(
    op: &SpectralOperator,
    lin: &Linearization,
    n: usize,
    theta: f64,
    h: &WeightedTrajectory,
    p: &[f64],
    cfg: &SolverConfig,
) -> Result<(WeightedTrajectory, FixedPointReport)> {
    check_split_window(op, n, theta)?;
    check_dim("linearization nodes", lin.nodes(), h.nodes())?;
    let grid = h.grid;
    let k = op.dim();
    let nodes = grid.nodes;
    let green = GreenOperator::new(op, n, grid.dt);
    let mut pn = p.to_vec();
    pn.iter_mut().skip(n).for_each(|x| *x = 0.0);
    let hom = homog_apply(op, n, &pn, grid, theta)?;
    let mut start = vec![0.0; nodes * k];
    green.apply_into(h.values(), nodes, &mut start);
    start.iter_mut().zip(hom.values()).for_each(|(a, b)| *a += b);
    if h.values().iter().all(|v| *v == 0.0) && pn.iter().all(|v| *v == 0.0) {
        return Ok((WeightedTrajectory::zeros(grid, k, theta), FixedPointReport::default()));
    }
    let scale = weighted_scale(&grid, k, theta);
    let mut src = vec![0.0; nodes * k];
    let mut out = vec![0.0; nodes * k];
    let (v, report) = fixed_point(start.clone(), &scale, cfg, |x| {
        lin.apply_into(x, &mut src);
        // 𝒯 is linear: 𝒯(F′v + h) + ℋp = 𝒯(F′v) + start
        green.apply_into(&src, nodes, &mut out);
        Ok(out.iter().zip(&start).map(|(a, b)| a + b).collect())
    })?;
    Ok((WeightedTrajectory::from_values(grid, k, theta, v)?, report))
}

/// Options for forward time stepping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Output (and nominal) step.
    pub dt: f64,
    /// Relative predictor–corrector discrepancy that triggers step halving.
    pub step_tol: f64,
    /// Richardson extrapolation with a half-step solve (third order).
    pub richardson: bool,
}

impl ForwardOptions {
    pub fn new(dt: f64) -> Self {
        Self { dt, step_tol: 1e-3, richardson: false }
    }
}

/// Second-order exponential integrator for `u̇ = −diag(λ)u + N(u)`.
///
/// Each step is the exponential trapezoid rule with the end-point source
/// predicted by exponential Euler. A step whose predictor–corrector
/// discrepancy exceeds `step_tol` (or that produces non-finite values) is
/// retried with halved substeps, at most 20 times.
pub fn integrate_exponential(
    lambdas: &[f64],
    rhs: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    u0: &[f64],
    horizon: f64,
    opts: ForwardOptions,
) -> Result<WeightedTrajectory> {
    check_dim("initial data", u0.len(), lambdas.len())?;
    if !(horizon > 0.0) {
        return Err(Error::Input("horizon must be positive".into()));
    }
    let grid = TimeGrid::spanning(0.0, horizon, opts.dt)?;
    let coarse = march(lambdas, rhs, u0, grid, 1, opts.step_tol)?;
    if !opts.richardson {
        return Ok(coarse);
    }
    let fine = march(lambdas, rhs, u0, grid, 2, opts.step_tol)?;
    let values = fine.values().iter().zip(coarse.values()).map(|(f, c)| (4.0 * f - c) / 3.0).collect();
    WeightedTrajectory::from_values(grid, lambdas.len(), 0.0, values)
}

fn march(
    lambdas: &[f64],
    rhs: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    u0: &[f64],
    grid: TimeGrid,
    sub: usize,
    step_tol: f64,
) -> Result<WeightedTrajectory> {
    let k = lambdas.len();
    let mut values = Vec::with_capacity(grid.nodes * k);
    values.extend_from_slice(u0);
    let mut u = u0.to_vec();
    let mut weight_cache: Vec<(usize, Vec<StepWeights>)> = Vec::new();
    for _ in 1..grid.nodes {
        let mut halvings = 0usize;
        loop {
            let pieces = sub << halvings;
            let h = grid.dt / pieces as f64;
            let w = match weight_cache.iter().find(|(p, _)| *p == pieces) {
                Some((_, w)) => w.clone(),
                None => {
                    let w: Vec<StepWeights> = lambdas.iter().map(|&l| StepWeights::new(l, h)).collect();
                    weight_cache.push((pieces, w.clone()));
                    w
                }
            };
            match try_steps(&w, rhs, &u, h, pieces, step_tol) {
                Ok(next) => {
                    u = next;
                    break;
                }
                Err(e) => {
                    halvings += 1;
                    if halvings > 20 {
                        return Err(Error::Stiffness(format!("step rejected after 20 halvings: {e}")));
                    }
                }
            }
        }
        values.extend_from_slice(&u);
    }
    WeightedTrajectory::from_values(grid, k, 0.0, values)
}

fn try_steps(
    w: &[StepWeights],
    rhs: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    u0: &[f64],
    h: f64,
    pieces: usize,
    step_tol: f64,
) -> Result<Vec<f64>> {
    let mut u = u0.to_vec();
    for _ in 0..pieces {
        let f0 = rhs(&u)?;
        let pred: Vec<f64> = (0..u.len()).map(|i| w[i].decay * u[i] + h * (w[i].fwd0 + w[i].fwd1) * f0[i]).collect();
        let f1 = rhs(&pred)?;
        let next: Vec<f64> =
            (0..u.len()).map(|i| w[i].decay * u[i] + h * (w[i].fwd0 * f0[i] + w[i].fwd1 * f1[i])).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Stiffness("non-finite state".into()));
        }
        let disc = norm(&next.iter().zip(&pred).map(|(a, b)| a - b).collect::<Vec<_>>());
        if disc > step_tol * (1.0 + norm(&next)) {
            return Err(Error::Stiffness(format!("predictor–corrector discrepancy {disc:e}")));
        }
        u = next;
    }
    Ok(u)
}

/// Forward solve of `∂t u + Au = F(u)` on `[0, horizon]`.
pub fn forward_solve(prob: &SemilinearProblem, u0: &[f64], horizon: f64, opts: ForwardOptions) -> Result<WeightedTrajectory> {
    let nl = prob.nl.clone();
    integrate_exponential(prob.op.eigenvalues(), &|u: &[f64]| Ok(nl.eval(u)), u0, horizon, opts)
}
