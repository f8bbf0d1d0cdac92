//! The two shipped case studies.
//!
//! * Sell's resonant cascade `u̇_n + 2^{n−1}u_n = u_{n−1}²` (`u̇₁ + u₁ = 0`),
//!   which has an explicit one-dimensional invariant manifold that is only
//!   finitely smooth because `2λ_n = λ_{n+1}`.
//! * A scalar reaction–diffusion equation `∂t u = a ∂ₓ²u − f(u)` on
//!   `(0, π)` with Dirichlet data (the odd part of the periodic problem on
//!   `(−π, π)`), Galerkin-truncated to `K` sine modes with a dealiased
//!   collocation nonlinearity and a smooth cutoff making `f` globally
//!   Lipschitz.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{binomial, integrate, linear_fit, series_compose, series_mul, Smoothstep};
use crate::parasolve::{Nonlinearity, SemilinearProblem};
use crate::spectral::SpectralOperator;

/// Largest cascade index accepted by the closed forms (underflow guard).
pub const SELL_MAX_INDEX: usize = 8;

/// Sell constants `C_0 … C_{n_max}` of `u_{n+1}(t) = C_n e^{−2ⁿt} t^{2ⁿ−1}`.
///
/// Each constant is obtained by integrating the next cascade equation along
/// the previous explicit component: with `u_{n+1} = e^{−2ⁿt} g(t)` one has
/// `g′ = e^{2ⁿt}u_n² = C_{n−1}² t^{2ⁿ−2}`, so the coefficient is
/// `C_{n−1}² ∫₀¹ s^{2ⁿ−2} ds`, evaluated by Gauss–Legendre quadrature.
pub fn sell_constants(n_max: usize) -> Result<Vec<f64>> {
    if n_max > SELL_MAX_INDEX {
        return Err(Error::Input(format!("cascade index {n_max} exceeds {SELL_MAX_INDEX}")));
    }
    let mut c = vec![1.0];
    for n in 1..=n_max {
        let power = (1u64 << n) as i32 - 2;
        let integral = integrate(|s| s.powi(power), 0.0, 1.0, 64);
        let prev: f64 = c[n - 1];
        c.push(prev * prev * integral);
    }
    Ok(c)
}

/// Component `n ≥ 1` of the explicit solution, `C_{n−1} e^{−2^{n−1}t} t^{2^{n−1}−1}`.
pub fn sell_explicit(t: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("cascade components are numbered from 1".into()));
    }
    let c = sell_constants(n - 1)?;
    let lam = 2f64.powi(n as i32 - 1);
    Ok(c[n - 1] * (-lam * t).exp() * t.powi(lam as i32 - 1))
}

/// Component `n ≥ 1` of the explicit one-dimensional manifold over `p = u₁`:
/// `C_{n−1} |p|^{2^{n−1}} ln(1/|p|)^{2^{n−1}−1}`; component 1 is `p` itself.
/// Requires `|p| < window`; returns the limit 0 at `p = 0`.
pub fn sell_manifold_chart(p: f64, n: usize, window: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("cascade components are numbered from 1".into()));
    }
    if !(p.abs() < window) {
        return Err(Error::Domain(format!("|p| = {} outside the local window {window}", p.abs())));
    }
    if n == 1 {
        return Ok(p);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let c = sell_constants(n - 1)?;
    let e = 1i32 << (n - 1);
    let a = p.abs();
    Ok(c[n - 1] * a.powi(e) * (1.0 / a).ln().powi(e - 1))
}

/// Derivative in `p` of [`sell_manifold_chart`].
pub fn sell_manifold_chart_derivative(p: f64, n: usize, window: f64) -> Result<f64> {
    if n == 1 {
        return Ok(1.0);
    }
    sell_manifold_chart(p, n, window)?;
    if p == 0.0 {
        return Ok(0.0);
    }
    let c = sell_constants(n - 1)?;
    let e = (1i32 << (n - 1)) as f64;
    let a = p.abs();
    let l = (1.0 / a).ln();
    // d/da [a^e l^{e−1}] = e a^{e−1} l^{e−1} − (e−1) a^{e−1} l^{e−2}
    let d = c[n - 1] * a.powf(e - 1.0) * (e * l.powf(e - 1.0) - (e - 1.0) * l.powf(e - 2.0));
    Ok(d * p.signum())
}

/// `F₁ = 0`, `F_n = u_{n−1}²`: the cascade without cutoff.
pub fn sell_rhs(u: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; u.len()];
    for n in 1..u.len() {
        f[n] = u[n - 1] * u[n - 1];
    }
    f
}

/// Jacobian of [`sell_rhs`] (row-major): `2u_{n−1}` on the sub-diagonal.
pub fn sell_jacobian(u: &[f64]) -> Vec<f64> {
    let k = u.len();
    let mut j = vec![0.0; k * k];
    for n in 1..k {
        j[n * k + n - 1] = 2.0 * u[n - 1];
    }
    j
}

/// Certificate that no quadratic manifold coefficient exists at a resonance.
#[derive(Debug, Clone, Serialize)]
pub struct ObstructionCertificate {
    pub index: usize,
    /// Coefficient of the unknown quadratic term after matching `e^{−2λ_n t}`:
    /// `−2λ_n + λ_{n+1}`, exactly zero at the resonance.
    pub coefficient: f64,
    /// Right-hand side that the coefficient must match.
    pub forcing: f64,
    /// Least-squares `c` for `u_{n+1} ≈ c·u_n²` on explicit-solution data.
    pub best_c: f64,
    /// RMS of `1 − c·u_n²/u_{n+1}` at `best_c`.
    pub residual: f64,
    /// Smallest such residual over a grid of trial `c`.
    pub grid_min_residual: f64,
    /// Same fit for the non-resonant ladder `λ_{n+1} = 2λ_n + 1`.
    pub contrast_residual: f64,
    pub passed: bool,
}

fn ratio_fit(ts: &[f64], ratio: &dyn Fn(f64) -> f64) -> (f64, f64, f64) {
    // minimise Σ(1 − c·q_i)² over c, with q_i = u_n²/u_{n+1}
    let q: Vec<f64> = ts.iter().map(|&t| ratio(t)).collect();
    let c = q.iter().sum::<f64>() / q.iter().map(|x| x * x).sum::<f64>();
    let rms = |c: f64| (q.iter().map(|x| (1.0 - c * x).powi(2)).sum::<f64>() / q.len() as f64).sqrt();
    let grid_min = (0..=4000)
        .map(|i| -100.0 + 0.05 * i as f64)
        .map(rms)
        .fold(f64::INFINITY, f64::min);
    (c, rms(c), grid_min)
}

/// Resonance obstruction for the pair `(n, n+1)`.
///
/// On the explicit solution `u_n²/u_{n+1} = (2ⁿ−1)/t`, so no constant `c`
/// makes `u_{n+1} − c·u_n²` small: the quadratic coefficient would have to
/// solve `0·c = 1`.
pub fn sell_c2_obstruction(n: usize) -> Result<ObstructionCertificate> {
    if n == 0 || n + 1 > SELL_MAX_INDEX {
        return Err(Error::Input(format!("resonance index {n} out of range")));
    }
    let lam_n = 2f64.powi(n as i32 - 1);
    let lam_next = 2f64.powi(n as i32);
    let coefficient = -2.0 * lam_n + lam_next;
    let ts: Vec<f64> = (0..=680).map(|i| 2.0 + 0.1 * i as f64).collect();
    let resonant = |t: f64| {
        let un = sell_explicit(t, n).expect("index checked");
        let un1 = sell_explicit(t, n + 1).expect("index checked");
        un * un / un1
    };
    let (best_c, residual, grid_min_residual) = ratio_fit(&ts, &resonant);
    // non-resonant contrast: u_a = e^{−λt}, u̇_b + (2λ+1)u_b = u_a² ⇒ u_b = e^{−2λt}
    let contrast = |t: f64| {
        let ua = (-lam_n * t).exp();
        let ub = (-2.0 * lam_n * t).exp() / ((2.0 * lam_n + 1.0) - 2.0 * lam_n);
        ua * ua / ub
    };
    let (_, contrast_residual, _) = ratio_fit(&ts, &contrast);
    Ok(ObstructionCertificate {
        index: n,
        coefficient,
        forcing: 1.0,
        best_c,
        residual,
        grid_min_residual,
        contrast_residual,
        passed: coefficient == 0.0 && residual >= 0.5 && grid_min_residual >= 0.5,
    })
}

/// Extended chart of the ideal cascade over the first `n` modes:
/// `(M_{n+1}(p₁), …, M_K(p₁))`, depending on `p₁` only.
pub fn sell_extended_chart(p_base: &[f64], n: usize, modes: usize, window: f64) -> Result<Vec<f64>> {
    if p_base.len() != n || n == 0 || n >= modes {
        return Err(Error::Input(format!("base of dimension {} for n = {n}, K = {modes}", p_base.len())));
    }
    ((n + 1)..=modes).map(|k| sell_manifold_chart(p_base[0], k, window)).collect()
}

/// Modified cascade nonlinearity over the first `n` modes: the base keeps
/// the Galerkin terms `u_{k−1}²` (`k ≤ n`), the remaining modes are forced
/// by `M_{k−1}(u₁)²`, so that the graph of [`sell_extended_chart`] is
/// invariant and the base decouples.
pub fn sell_modified_rhs(u: &[f64], n: usize, window: f64) -> Result<Vec<f64>> {
    let k = u.len();
    if n == 0 || n >= k {
        return Err(Error::Input(format!("split {n} invalid for K = {k}")));
    }
    let mut f = vec![0.0; k];
    for m in 1..k {
        f[m] = if m < n {
            u[m - 1] * u[m - 1]
        } else {
            let v = sell_manifold_chart(u[0], m, window)?;
            v * v
        };
    }
    Ok(f)
}

/// Defaults of the cutoff Sell problem used by the Perron machinery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SellParams {
    /// Number of modes `K`.
    pub modes: usize,
    /// Local base radius `β`.
    pub window: f64,
    /// Sign branch of the base coordinate (`+1` or `−1`).
    pub sign: f64,
    /// Nominal Lipschitz constant used for the gap ladder.
    pub lipschitz: f64,
    /// Cutoff starts at `|u₁| = inner_radius`.
    pub inner_radius: f64,
    /// Smoothness order of the cutoff profile.
    pub cutoff_order: usize,
}

impl Default for SellParams {
    fn default() -> Self {
        Self { modes: 7, window: 0.2, sign: 1.0, lipschitz: 0.1, inner_radius: 0.5, cutoff_order: 5 }
    }
}

/// Radial cutoff `χ(r) = 1 − S((r − R₀)/(R₁ − R₀))` whose outer radius is
/// calibrated so that `∫_{R₀}^{R₁} χ(r)/r dr = ln(1/R₀)`. This makes the
/// second component of the cut-off manifold coincide with `p² ln(1/p)` for
/// `|p| < R₀`.
#[derive(Debug, Clone)]
pub struct SellCutoff {
    inner: f64,
    outer: f64,
    step: Smoothstep,
}

impl SellCutoff {
    pub fn calibrated(inner: f64, order: usize) -> Result<Self> {
        if !(inner > 0.0 && inner < 1.0) {
            return Err(Error::Input("cutoff inner radius must lie in (0, 1)".into()));
        }
        let step = Smoothstep::new(order);
        let target = (1.0 / inner).ln();
        let mass = |outer: f64| {
            let w = outer - inner;
            integrate(|r| (1.0 - step.eval((r - inner) / w)) / r, inner, outer, 200)
        };
        let (mut lo, mut hi) = (inner * (1.0 + 1e-9), inner * 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self { inner, outer: 0.5 * (lo + hi), step })
    }

    pub fn inner(&self) -> f64 {
        self.inner
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    pub fn eval(&self, s: f64) -> f64 {
        1.0 - self.step.eval((s.abs() - self.inner) / (self.outer - self.inner))
    }

    /// Derivatives `0..=n` in `s` (through `|s|`).
    pub fn derivatives(&self, s: f64, n: usize) -> Vec<f64> {
        let w = self.outer - self.inner;
        let d = self.step.derivatives((s.abs() - self.inner) / w, n);
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        d.iter()
            .enumerate()
            .map(|(k, v)| if k == 0 { 1.0 - v } else { -v * (sign / w).powi(k as i32) })
            .collect()
    }
}

/// Cut-off Sell nonlinearity `F₁ = 0`, `F_n = χ(u₁)u_{n−1}²`.
#[derive(Debug, Clone)]
pub struct SellNonlinearity {
    modes: usize,
    cutoff: SellCutoff,
    lipschitz: f64,
}

impl SellNonlinearity {
    pub fn cutoff(&self) -> &SellCutoff {
        &self.cutoff
    }
}

impl Nonlinearity for SellNonlinearity {
    fn dim(&self) -> usize {
        self.modes
    }

    fn eval(&self, u: &[f64]) -> Vec<f64> {
        let chi = self.cutoff.eval(u[0]);
        let mut f = vec![0.0; self.modes];
        if chi == 0.0 {
            return f;
        }
        for n in 1..self.modes {
            f[n] = chi * u[n - 1] * u[n - 1];
        }
        f
    }

    fn jacobian(&self, u: &[f64]) -> Vec<f64> {
        let k = self.modes;
        let mut j = vec![0.0; k * k];
        let d = self.cutoff.derivatives(u[0], 1);
        if d[0] == 0.0 && d[1] == 0.0 {
            return j;
        }
        for n in 1..k {
            j[n * k + n - 1] += 2.0 * d[0] * u[n - 1];
            j[n * k] += d[1] * u[n - 1] * u[n - 1];
        }
        j
    }

    fn series(&self, x: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let deg = x.len() - 1;
        let k = self.modes;
        let mut out = vec![vec![0.0; k]; deg + 1];
        let d = self.cutoff.derivatives(x[0][0], deg);
        if d.iter().all(|v| *v == 0.0) {
            return Some(out);
        }
        let mut y: Vec<f64> = x.iter().map(|v| v[0]).collect();
        y[0] = 0.0;
        let chi = series_compose(&d, &y, deg);
        for n in 1..k {
            let c: Vec<f64> = x.iter().map(|v| v[n - 1]).collect();
            let sq = series_mul(&c, &c, deg);
            let f = series_mul(&chi, &sq, deg);
            for (i, fi) in f.into_iter().enumerate() {
                out[i][n] = fi;
            }
        }
        Some(out)
    }

    fn series_linearized(&self, x: &[Vec<f64>], dir: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        // F′(X)D: (F_n)′ = χ′(X₁)D₁X_{n−1}² + 2χ(X₁)X_{n−1}D_{n−1}
        let deg = x.len() - 1;
        let k = self.modes;
        let mut out = vec![vec![0.0; k]; deg + 1];
        let d = self.cutoff.derivatives(x[0][0], deg + 1);
        if d.iter().all(|v| *v == 0.0) {
            return Some(out);
        }
        let mut y: Vec<f64> = x.iter().map(|v| v[0]).collect();
        y[0] = 0.0;
        let chi = series_compose(&d[..=deg], &y, deg);
        let dchi = series_compose(&d[1..], &y, deg);
        let d1: Vec<f64> = dir.iter().map(|v| v[0]).collect();
        let dchi_d1 = series_mul(&dchi, &d1, deg);
        for n in 1..k {
            let c: Vec<f64> = x.iter().map(|v| v[n - 1]).collect();
            let e: Vec<f64> = dir.iter().map(|v| v[n - 1]).collect();
            let sq = series_mul(&c, &c, deg);
            let a = series_mul(&dchi_d1, &sq, deg);
            let b = series_mul(&chi, &series_mul(&c, &e, deg), deg);
            for i in 0..=deg {
                out[i][n] = a[i] + 2.0 * b[i];
            }
        }
        Some(out)
    }

    fn low_modes_closed(&self, _n: usize) -> bool {
        // F_k involves u₁ and u_{k−1} only
        true
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// The cut-off Sell cascade as a Perron-ready problem.
#[derive(Debug, Clone)]
pub struct SellModel {
    pub params: SellParams,
    pub problem: SemilinearProblem,
    nl: Arc<SellNonlinearity>,
}

impl SellModel {
    pub fn new(params: SellParams) -> Result<Self> {
        if params.modes < 3 || params.modes > SELL_MAX_INDEX + 1 {
            return Err(Error::Input(format!("Sell model needs 3 ≤ K ≤ {}", SELL_MAX_INDEX + 1)));
        }
        if !(params.window > 0.0 && params.window <= params.inner_radius) {
            return Err(Error::Input("window must lie in (0, inner cutoff radius]".into()));
        }
        if params.sign != 1.0 && params.sign != -1.0 {
            return Err(Error::Input("sign branch must be +1 or −1".into()));
        }
        let cutoff = SellCutoff::calibrated(params.inner_radius, params.cutoff_order)?;
        let nl = Arc::new(SellNonlinearity { modes: params.modes, cutoff, lipschitz: params.lipschitz });
        let op = SpectralOperator::dyadic(params.modes)?;
        let problem = SemilinearProblem::new(op, nl.clone())?;
        Ok(Self { params, problem, nl })
    }

    pub fn nonlinearity(&self) -> &SellNonlinearity {
        &self.nl
    }

    /// Base coordinate on the chosen sign branch.
    pub fn base_point(&self, magnitude: f64) -> f64 {
        self.params.sign * magnitude
    }
}

/// Reaction term `f` of the reaction–diffusion equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reaction {
    /// `f(u) = u³ − u` (real Ginzburg–Landau / Allen–Cahn), cut off at `R`.
    Cubic,
    /// `f(u) = c·u`; already globally Lipschitz, so no cutoff is applied.
    Linear { c: f64 },
}

impl Reaction {
    /// Derivatives `0..=n` of `f` at `s`.
    fn derivatives(&self, s: f64, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n + 1];
        match *self {
            Reaction::Cubic => {
                let all = [s * s * s - s, 3.0 * s * s - 1.0, 6.0 * s, 6.0];
                for (i, v) in all.iter().enumerate().take(n + 1) {
                    d[i] = *v;
                }
            }
            Reaction::Linear { c } => {
                d[0] = c * s;
                if n >= 1 {
                    d[1] = c;
                }
            }
        }
        d
    }
}

/// Parameters of the reaction–diffusion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdsParams {
    /// Diffusion coefficient `a`.
    pub diffusion: f64,
    pub reaction: Reaction,
    /// Cutoff radius `R` (sup-norm plateau); the cutoff vanishes beyond `2R`.
    pub cutoff_radius: f64,
    /// Number of sine modes `K`.
    pub modes: usize,
}

impl Default for RdsParams {
    fn default() -> Self {
        Self { diffusion: 1.0, reaction: Reaction::Cubic, cutoff_radius: 1.0, modes: 9 }
    }
}

/// `g = f·χ_R` evaluated pointwise on the collocation grid.
#[derive(Debug, Clone)]
struct CutoffReaction {
    reaction: Reaction,
    radius: f64,
    step: Smoothstep,
}

impl CutoffReaction {
    fn derivatives(&self, s: f64, n: usize) -> Vec<f64> {
        let f = self.reaction.derivatives(s, n);
        if matches!(self.reaction, Reaction::Linear { .. }) {
            return f;
        }
        let x = (s.abs() - self.radius) / self.radius;
        if x <= 0.0 {
            return f;
        }
        if x >= 1.0 {
            return vec![0.0; n + 1];
        }
        let sd = self.step.derivatives(x, n);
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        let chi: Vec<f64> = sd
            .iter()
            .enumerate()
            .map(|(k, v)| if k == 0 { 1.0 - v } else { -v * (sign / self.radius).powi(k as i32) })
            .collect();
        (0..=n).map(|m| (0..=m).map(|i| binomial(m, i) * f[i] * chi[m - i]).sum()).collect()
    }
}

/// Galerkin nonlinearity `F(u) = −Π_K g(u(x))` of the reaction–diffusion model.
#[derive(Debug, Clone)]
pub struct RdsNonlinearity {
    modes: usize,
    points: usize,
    /// `e_k(x_j)`, row-major `points × modes`.
    basis: Vec<f64>,
    /// Quadrature weight `π/(P+1)`.
    weight: f64,
    g: CutoffReaction,
    lipschitz: f64,
}

impl RdsNonlinearity {
    /// Physical values `u(x_j)` of sine coefficients.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.points)
            .map(|j| {
                self.basis[j * self.modes..(j + 1) * self.modes].iter().zip(coeffs).map(|(e, c)| e * c).sum()
            })
            .collect()
    }

    /// `(g, e_k)` from point values (discrete sine transform).
    pub fn analyze(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.modes];
        for (j, v) in values.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let row = &self.basis[j * self.modes..(j + 1) * self.modes];
            for (o, e) in out.iter_mut().zip(row) {
                *o += self.weight * v * e;
            }
        }
        out
    }

    pub fn collocation_points(&self) -> Vec<f64> {
        (1..=self.points).map(|j| j as f64 * PI / (self.points + 1) as f64).collect()
    }

    /// Cut-off reaction `g(s)` and its derivatives.
    pub fn reaction_derivatives(&self, s: f64, n: usize) -> Vec<f64> {
        self.g.derivatives(s, n)
    }
}

impl Nonlinearity for RdsNonlinearity {
    fn dim(&self) -> usize {
        self.modes
    }

    fn eval(&self, u: &[f64]) -> Vec<f64> {
        let vals: Vec<f64> = self.synthesize(u).iter().map(|&s| -self.g.derivatives(s, 0)[0]).collect();
        self.analyze(&vals)
    }

    fn jacobian(&self, u: &[f64]) -> Vec<f64> {
        let k = self.modes;
        let phys = self.synthesize(u);
        let mut jac = vec![0.0; k * k];
        for (j, s) in phys.iter().enumerate() {
            let gp = -self.g.derivatives(*s, 1)[1] * self.weight;
            if gp == 0.0 {
                continue;
            }
            let row = &self.basis[j * k..(j + 1) * k];
            for a in 0..k {
                let ea = row[a] * gp;
                for b in 0..k {
                    jac[a * k + b] += ea * row[b];
                }
            }
        }
        jac
    }

    fn series(&self, x: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let deg = x.len() - 1;
        let phys: Vec<Vec<f64>> = x.iter().map(|c| self.synthesize(c)).collect();
        let mut point_series = vec![vec![0.0; self.points]; deg + 1];
        for j in 0..self.points {
            let mut y: Vec<f64> = phys.iter().map(|v| v[j]).collect();
            let base = y[0];
            y[0] = 0.0;
            let d = self.g.derivatives(base, deg);
            let s = series_compose(&d, &y, deg);
            for i in 0..=deg {
                point_series[i][j] = -s[i];
            }
        }
        Some(point_series.iter().map(|v| self.analyze(v)).collect())
    }

    fn series_linearized(&self, x: &[Vec<f64>], dir: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let deg = x.len() - 1;
        let phys: Vec<Vec<f64>> = x.iter().map(|c| self.synthesize(c)).collect();
        let dphys: Vec<Vec<f64>> = dir.iter().map(|c| self.synthesize(c)).collect();
        let mut point_series = vec![vec![0.0; self.points]; deg + 1];
        for j in 0..self.points {
            let mut y: Vec<f64> = phys.iter().map(|v| v[j]).collect();
            let base = y[0];
            y[0] = 0.0;
            let d = self.g.derivatives(base, deg + 1);
            let gp = series_compose(&d[1..], &y, deg);
            let dj: Vec<f64> = dphys.iter().map(|v| v[j]).collect();
            let s = series_mul(&gp, &dj, deg);
            for i in 0..=deg {
                point_series[i][j] = -s[i];
            }
        }
        Some(point_series.iter().map(|v| self.analyze(v)).collect())
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Reaction–diffusion problem with its certified Lipschitz constant.
#[derive(Debug, Clone)]
pub struct RdsModel {
    pub params: RdsParams,
    pub problem: SemilinearProblem,
    nl: Arc<RdsNonlinearity>,
}

impl RdsModel {
    pub fn nonlinearity(&self) -> &RdsNonlinearity {
        &self.nl
    }
}

/// Build the spectral reaction–diffusion problem: `A = diag(a k²)`,
/// `F(u) = −Π_K(g(u))` by collocation on `4K` interior points, `g = f·χ_R`
/// with a quintic radial cutoff, and `L = 1.1·max|g′|` on a fine grid.
pub fn rds_build(params: RdsParams) -> Result<RdsModel> {
    if !(params.diffusion > 0.0) {
        return Err(Error::Input("diffusion must be positive".into()));
    }
    if params.modes < 2 {
        return Err(Error::Input("need at least two sine modes".into()));
    }
    if !(params.cutoff_radius > 0.0) {
        return Err(Error::Input("cutoff radius must be positive".into()));
    }
    let k = params.modes;
    let points = 4 * k;
    let h = PI / (points + 1) as f64;
    let norm = (2.0 / PI).sqrt();
    let mut basis = Vec::with_capacity(points * k);
    for j in 1..=points {
        let x = j as f64 * h;
        for m in 1..=k {
            basis.push(norm * (m as f64 * x).sin());
        }
    }
    let g = CutoffReaction { reaction: params.reaction, radius: params.cutoff_radius, step: Smoothstep::quintic() };
    let span = 3.0 * params.cutoff_radius;
    let samples = 200_000;
    let gmax = (0..=samples)
        .map(|i| g.derivatives(-span + 2.0 * span * i as f64 / samples as f64, 1)[1].abs())
        .fold(0.0, f64::max);
    let nl = Arc::new(RdsNonlinearity { modes: k, points, basis, weight: h, g, lipschitz: 1.1 * gmax });
    let op = SpectralOperator::squares(params.diffusion, k)?;
    let problem = SemilinearProblem::new(op, nl.clone())?;
    Ok(RdsModel { params, problem, nl })
}

/// Named initial profiles for the reaction–diffusion model, as sine coefficients.
pub fn rds_profile(name: &str, modes: usize, amplitude: f64) -> Result<Vec<f64>> {
    let mut c = vec![0.0; modes];
    match name {
        "first-mode" => c[0] = amplitude,
        "decaying" => {
            for (k, v) in c.iter_mut().enumerate() {
                *v = amplitude / ((k + 1) * (k + 1)) as f64;
            }
        }
        "alternating" => {
            for (k, v) in c.iter_mut().enumerate() {
                *v = amplitude * if k % 2 == 0 { 1.0 } else { -0.5 } / (k + 1) as f64;
            }
        }
        other => return Err(Error::Input(format!("unknown profile '{other}'"))),
    }
    Ok(c)
}

/// Divided-difference smoothness probe of a closed-form chart at the origin.
#[derive(Debug, Clone, Serialize)]
pub struct SmoothnessProbe {
    pub order: usize,
    pub steps: Vec<f64>,
    /// `|Δ_h^k f(h)| / h^k` on nodes `h(1+j)`, `j = 0…k`.
    pub values: Vec<f64>,
    /// Tail behaviour as `h → 0`.
    pub bounded: bool,
}

/// `k`-th forward divided differences of `M_{n+1}` on nodes `h(1+j)` for
/// `h = 10^{−2} … 10^{−10}`. A non-increasing tail means bounded, an
/// increasing one divergent.
pub fn sell_smoothness_probe(n: usize, order: usize) -> Result<SmoothnessProbe> {
    let steps: Vec<f64> = (2..=10).map(|e| 10f64.powi(-e)).collect();
    let mut values = Vec::with_capacity(steps.len());
    for &h in &steps {
        let mut acc = 0.0;
        for j in 0..=order {
            let sign = if (order - j) % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * binomial(order, j) * sell_manifold_chart(h * (1 + j) as f64, n + 1, 1.0)?;
        }
        values.push((acc / h.powi(order as i32)).abs());
    }
    let tail = &values[values.len() - 4..];
    let bounded = tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6));
    Ok(SmoothnessProbe { order, steps, values, bounded })
}

/// Slope of `ln|M_{n+1}|` against `ln p`, a quick check that the chart
/// vanishes like `p^{2ⁿ}` up to logarithms.
pub fn sell_chart_exponent(n: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = (3..=8)
        .map(|e| {
            let p = 10f64.powi(-e);
            (p.ln(), sell_manifold_chart(p, n + 1, 1.0).map(|v| v.ln()).unwrap_or(f64::NAN))
        })
        .collect();
    linear_fit(&pts).map(|(s, _)| s).ok_or_else(|| Error::InsufficientSamples("degenerate fit".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_follow_recurrence() {
        let c = sell_constants(4).unwrap();
        let want = [1.0, 1.0, 1.0 / 3.0, 1.0 / 63.0, 1.0 / (63.0 * 63.0 * 15.0)];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-12 * b, "{a} vs {b}");
        }
        assert!(sell_constants(9).is_err());
    }

    #[test]
    fn explicit_solution_solves_cascade() {
        // u̇_n = −2^{n−1}u_n + u_{n−1}² checked with a central difference
        for n in 2..=5 {
            for i in 1..50 {
                let t = 0.1 * i as f64;
                let h = 1e-5;
                let du = (sell_explicit(t + h, n).unwrap() - sell_explicit(t - h, n).unwrap()) / (2.0 * h);
                let lam = 2f64.powi(n as i32 - 1);
                let rhs = -lam * sell_explicit(t, n).unwrap() + sell_explicit(t, n - 1).unwrap().powi(2);
                assert!((du - rhs).abs() < 1e-8, "n={n} t={t}");
            }
        }
    }

    #[test]
    fn chart_component_two() {
        let v = sell_manifold_chart(0.1, 2, 0.2).unwrap();
        assert!((v - 0.01 * 10f64.ln()).abs() < 1e-15);
        assert!((v - 0.023026).abs() < 1e-6);
        assert_eq!(sell_manifold_chart(0.0, 3, 0.2).unwrap(), 0.0);
        assert!(matches!(sell_manifold_chart(0.25, 2, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn chart_derivative_matches_differences() {
        for n in 2..=4 {
            let p = 0.07;
            let h = 1e-6;
            let fd = (sell_manifold_chart(p + h, n, 0.2).unwrap() - sell_manifold_chart(p - h, n, 0.2).unwrap())
                / (2.0 * h);
            let d = sell_manifold_chart_derivative(p, n, 0.2).unwrap();
            assert!((fd - d).abs() < 1e-8 * d.abs().max(1e-6));
        }
    }

    #[test]
    fn rhs_and_jacobian() {
        assert_eq!(sell_rhs(&[1.0, 0.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(sell_rhs(&[0.0; 3]), vec![0.0; 3]);
        let u = [0.3, -0.2, 0.5];
        let j = sell_jacobian(&u);
        let h = 1e-6;
        for c in 0..3 {
            let mut up = u;
            let mut um = u;
            up[c] += h;
            um[c] -= h;
            let fp = sell_rhs(&up);
            let fm = sell_rhs(&um);
            for r in 0..3 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - j[r * 3 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn obstruction_certificate() {
        for n in 1..=3 {
            let c = sell_c2_obstruction(n).unwrap();
            assert_eq!(c.coefficient, 0.0);
            assert_eq!(c.forcing, 1.0);
            assert!(c.residual >= 0.5 && c.passed, "{c:?}");
            assert!(c.contrast_residual <= 1e-6);
        }
    }

    #[test]
    fn calibrated_cutoff_reproduces_log_law() {
        let cut = SellCutoff::calibrated(0.5, 5).unwrap();
        let p: f64 = 0.1;
        // p² ∫_p^∞ χ(r)/r dr
        let integral = (0.5f64 / p).ln()
            + integrate(|r| cut.eval(r) / r, cut.inner(), cut.outer(), 400);
        assert!((p * p * integral - p * p * (1.0 / p).ln()).abs() < 1e-12);
        let d = cut.derivatives(0.5 * (cut.inner() + cut.outer()), 2);
        let h = 1e-5;
        let m = 0.5 * (cut.inner() + cut.outer());
        assert!(((cut.eval(m + h) - cut.eval(m - h)) / (2.0 * h) - d[1]).abs() < 1e-8);
    }

    #[test]
    fn sell_series_matches_evaluation() {
        let model = SellModel::new(SellParams::default()).unwrap();
        let nl = model.nonlinearity();
        let base = vec![1.2, 0.3, -0.1, 0.2, 0.05, 0.0, 0.1];
        let dir = vec![0.4, -0.2, 0.3, 0.1, -0.5, 0.2, 0.0];
        let s = nl.series(&[base.clone(), dir.clone(), vec![0.0; 7], vec![0.0; 7]]).unwrap();
        let t = 1e-3;
        let x: Vec<f64> = base.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
        let f = nl.eval(&x);
        for n in 0..7 {
            let approx = s[0][n] + t * s[1][n] + t * t * s[2][n] + t.powi(3) * s[3][n];
            assert!((approx - f[n]).abs() < 1e-10, "mode {n}");
        }
        let lin = nl.series_linearized(&[base.clone(), dir.clone()], &[dir.clone(), vec![0.0; 7]]).unwrap();
        // degree-0 term is F′(u)·d; degree-1 is F″(u)[d, d]
        let jac = nl.jacobian(&base);
        for r in 0..7 {
            let jd: f64 = (0..7).map(|c| jac[r * 7 + c] * dir[c]).sum();
            assert!((lin[0][r] - jd).abs() < 1e-12);
            assert!((lin[1][r] - 2.0 * s[2][r]).abs() < 1e-10);
        }
    }

    #[test]
    fn rds_eigenvalues_and_lipschitz() {
        let m = rds_build(RdsParams::default()).unwrap();
        assert_eq!(&m.problem.op.eigenvalues()[..3], &[1.0, 4.0, 9.0]);
        assert!((m.problem.lipschitz - 3.3255).abs() < 1e-2);
    }

    #[test]
    fn rds_collocation_matches_quadrature() {
        let m = rds_build(RdsParams { modes: 6, ..RdsParams::default() }).unwrap();
        let nl = m.nonlinearity();
        let u = [0.3, -0.2, 0.1, 0.05, -0.04, 0.02];
        let f = nl.eval(&u);
        for k in 0..6 {
            let integrand = |x: f64| {
                let s: f64 = (0..6).map(|m| u[m] * (2.0 / PI).sqrt() * ((m + 1) as f64 * x).sin()).sum();
                -(s * s * s - s) * (2.0 / PI).sqrt() * ((k + 1) as f64 * x).sin()
            };
            let q = integrate(integrand, 0.0, PI, 200);
            assert!((q - f[k]).abs() < 1e-8, "mode {k}: {q} vs {}", f[k]);
        }
    }

    #[test]
    fn rds_linear_reaction_is_diagonal() {
        let m = rds_build(RdsParams { reaction: Reaction::Linear { c: -1.0 }, modes: 5, ..RdsParams::default() }).unwrap();
        let f = m.nonlinearity().eval(&[1.0, 2.0, 0.0, -1.0, 0.5]);
        for (a, b) in f.iter().zip([1.0, 2.0, 0.0, -1.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rds_series_and_jacobian_consistent() {
        let m = rds_build(RdsParams { modes: 5, cutoff_radius: 0.6, ..RdsParams::default() }).unwrap();
        let nl = m.nonlinearity();
        let u = vec![0.5, 0.2, -0.3, 0.1, 0.0];
        let d = vec![0.1, -0.2, 0.05, 0.0, 0.3];
        let jac = nl.jacobian(&u);
        let fd = <RdsNonlinearity as Nonlinearity>::jacobian;
        let _ = fd;
        let h = 1e-6;
        let up: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = (nl.eval(&up), nl.eval(&um));
        let s = nl.series(&[u.clone(), d.clone()]).unwrap();
        for r in 0..5 {
            let jd: f64 = (0..5).map(|c| jac[r * 5 + c] * d[c]).sum();
            let diff = (fp[r] - fm[r]) / (2.0 * h);
            assert!((jd - diff).abs() < 1e-7);
            assert!((s[1][r] - jd).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_probe_detects_finite_smoothness() {
        for n in 1..=2 {
            let top = 1usize << n;
            for k in 1..top {
                assert!(sell_smoothness_probe(n, k).unwrap().bounded, "n={n} k={k}");
            }
            assert!(!sell_smoothness_probe(n, top).unwrap().bounded, "n={n}");
        }
    }

    #[test]
    fn modified_rhs_keeps_graph_invariant() {
        let u1: f64 = 0.1;
        let (n, k) = (2, 5);
        let mut u = vec![u1, sell_manifold_chart(u1, 2, 0.2).unwrap()];
        u.extend(sell_extended_chart(&u[..2], n, k, 0.2).unwrap());
        let f = sell_modified_rhs(&u, n, 0.2).unwrap();
        // d/dt M_m(u₁) = M_m′(u₁)·(−u₁) must equal −λ_m M_m + F̃_m for m > n
        for m in (n + 1)..=k {
            let lam = 2f64.powi(m as i32 - 1);
            let lhs = sell_manifold_chart_derivative(u1, m, 0.2).unwrap() * (-u1);
            let rhs = -lam * u[m - 1] + f[m - 1];
            assert!((lhs - rhs).abs() < 1e-14, "mode {m}");
        }
    }
}
