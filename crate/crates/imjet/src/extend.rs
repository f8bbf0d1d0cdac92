//! Smooth extension of the top manifold from jets sampled along the level-1
//! manifold, the extended inertial form, and the modified nonlinearity for
//! which the extension is invariant.
//!
//! The extension is `M̃ = (1 − ρ_ν)·M̂ + ρ_ν·S_{ν²}M`, where
//!
//! * `M̂` is a partition-of-unity blend of the sampled Taylor jets — a
//!   practical stand-in for Whitney's extension theorem: compactly supported
//!   bumps times an inverse-distance factor, normalized, so the blend
//!   reproduces each jet (value and first derivative) at its sample point
//!   and reproduces polynomials of degree ≤ n exactly;
//! * `S_μ` is convolution with a tensor-product bump `(1 − s²)³`, evaluated
//!   by 5-point Gauss quadrature per axis with weights renormalized to unit
//!   mass;
//! * `ρ_ν` is a smoothstep in the distance to the sampled base manifold, 0 on
//!   the `ν`-tube and 1 beyond `2ν`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::jetcalc::Jet;
use crate::jets_manifold::JetLadder;
use crate::numerics::{norm, sub, Smoothstep, GAUSS5_NODES, GAUSS5_WEIGHTS};
use crate::parasolve::{integrate_exponential, ForwardOptions, Nonlinearity, SemilinearProblem, WeightedTrajectory};
use crate::spectral::SpectralOperator;

/// Extension parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtensionConfig {
    /// Tube width `ν` of the cutoff.
    pub nu: f64,
    /// Mollifier half-width `μ` (default `ν²`).
    pub mu: f64,
    /// Jet order used by the blend.
    pub order: usize,
    /// Power of the inverse-distance factor in the blend weights.
    pub blend_power: i32,
    /// Finite-difference step for derivatives where no analytic form exists.
    pub fd_step: f64,
}

impl ExtensionConfig {
    pub fn new(nu: f64, order: usize) -> Self {
        Self { nu, mu: nu * nu, order, blend_power: 4, fd_step: 1e-4 }
    }
}

/// `ρ_ν(d) = S(d/ν − 1)`: 0 for `d ≤ ν`, 1 for `d ≥ 2ν`, `|ρ′| ≤ 15/(8ν)`.
pub fn cutoff_profile(distance: f64, nu: f64) -> (f64, f64) {
    let s = Smoothstep::quintic();
    let d = s.derivatives(distance / nu - 1.0, 1);
    (d[0], d[1] / nu)
}

/// Tensor-product bump `Π(1 − s_i²)³` on the unit cube.
fn bump(s: f64) -> f64 {
    let q = 1.0 - s * s;
    q * q * q
}

/// `S_μ f(p) = ∫ β_μ(p − q) f(q) dq` by tensor Gauss quadrature with
/// renormalized weights (constants are reproduced exactly).
pub fn mollify(f: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync), mu: f64, p: &[f64]) -> Result<Vec<f64>> {
    if !(mu > 0.0) {
        return Err(Error::Input("mollifier width must be positive".into()));
    }
    let d = p.len();
    let count = 5usize.pow(d as u32);
    let nodes: Vec<(Vec<f64>, f64)> = (0..count)
        .map(|mut idx| {
            let mut q = p.to_vec();
            let mut w = 1.0;
            for qi in q.iter_mut() {
                let j = idx % 5;
                idx /= 5;
                let s = GAUSS5_NODES[j];
                *qi += mu * s;
                w *= GAUSS5_WEIGHTS[j] * bump(s);
            }
            (q, w)
        })
        .collect();
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    let values: Vec<Vec<f64>> = nodes.par_iter().map(|(q, _)| f(q)).collect::<Result<_>>()?;
    let mut out = vec![0.0; values[0].len()];
    for ((_, w), v) in nodes.iter().zip(&values) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += w / total * x);
    }
    Ok(out)
}

/// One sampled jet on the base manifold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JetSite {
    /// Level-1 coordinates `c ∈ H_{N₁}`.
    pub coords: Vec<f64>,
    /// Anchor `s = P_{N_n}(c + M_{N₁}(c))`.
    pub point: Vec<f64>,
    /// Tangent of the base parametrization at `c`, row-major `N_n × N₁`.
    pub tangent: Vec<f64>,
    pub jet: Jet,
}

/// Partition-of-unity blend of sampled jets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitneyBlend {
    pub sites: Vec<JetSite>,
    /// Support radius of each bump.
    pub radius: f64,
    pub power: i32,
}

impl WhitneyBlend {
    pub fn new(sites: Vec<JetSite>, radius: f64, power: i32) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::InsufficientSamples("blend needs at least one jet".into()));
        }
        if !(radius > 0.0) || power < 2 {
            return Err(Error::Input("blend radius must be positive and the power at least 2".into()));
        }
        Ok(Self { sites, radius, power })
    }

    pub fn dim_in(&self) -> usize {
        self.sites[0].point.len()
    }

    pub fn dim_out(&self) -> usize {
        self.sites[0].jet.dim_out()
    }

    /// Largest nearest-neighbour distance among the anchors.
    pub fn spacing(&self) -> f64 {
        let pts: Vec<&[f64]> = self.sites.iter().map(|s| s.point.as_slice()).collect();
        if pts.len() < 2 {
            return 0.0;
        }
        pts.iter()
            .enumerate()
            .map(|(i, a)| {
                pts.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| norm(&sub(a, b)))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    /// Blend value and Jacobian (row-major `dim_out × dim_in`) at `p`.
    pub fn eval_with_gradient(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("blend query", p.len(), self.dim_in())?;
        let (m, d) = (self.dim_out(), self.dim_in());
        let mut num = vec![0.0; m];
        let mut dnum = vec![0.0; m * d];
        let mut den = 0.0;
        let mut dden = vec![0.0; d];
        let step = Smoothstep::quintic();
        for site in &self.sites {
            let x = sub(p, &site.point);
            let r = norm(&x);
            if r == 0.0 {
                // exact interpolation: every other weight is o(r^power) relative
                return site.jet.eval_with_gradient(&x);
            }
            if r >= self.radius {
                continue;
            }
            // w = φ(r/R)·r^{−power}, φ = 1 − S: smooth, compactly supported
            let ds = step.derivatives(r / self.radius, 1);
            let phi = 1.0 - ds[0];
            let dphi = -ds[1] / self.radius;
            let rp = r.powi(-self.power);
            let w = phi * rp;
            let dw_dr = dphi * rp - self.power as f64 * phi * rp / r;
            if w == 0.0 && dw_dr == 0.0 {
                continue;
            }
            let (v, g) = site.jet.eval_with_gradient(&x)?;
            den += w;
            for i in 0..d {
                dden[i] += dw_dr * x[i] / r;
            }
            for o in 0..m {
                num[o] += w * v[o];
                for i in 0..d {
                    dnum[o * d + i] += w * g[o * d + i] + dw_dr * x[i] / r * v[o];
                }
            }
        }
        if den <= 0.0 {
            return Err(Error::Coverage(format!("no sampled jet within {} of the query", self.radius)));
        }
        let val: Vec<f64> = num.iter().map(|v| v / den).collect();
        let mut grad = vec![0.0; m * d];
        for o in 0..m {
            for i in 0..d {
                grad[o * d + i] = (dnum[o * d + i] - val[o] * dden[i]) / den;
            }
        }
        Ok((val, grad))
    }

    pub fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_with_gradient(p)?.0)
    }

    /// Distance from `p` to the sampled base manifold: nearest anchor, then
    /// one Gauss–Newton step on that anchor's tangent plane.
    pub fn distance(&self, p: &[f64]) -> Result<f64> {
        check_dim("distance query", p.len(), self.dim_in())?;
        let (site, _) = self
            .sites
            .iter()
            .map(|s| (s, norm(&sub(p, &s.point))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty sites");
        let d = p.len();
        let cols = site.coords.len();
        let t = DMatrix::from_row_slice(d, cols, &site.tangent);
        let rhs = DVector::from_vec(sub(p, &site.point));
        let step = t.clone().svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::Input(e.to_string()))?;
        let foot = t * step;
        Ok((rhs - foot).norm())
    }
}

/// Polynomial-reproduction check: the value of the blend of exact jets.
pub fn whitney_blend(blend: &WhitneyBlend, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    blend.eval_with_gradient(p)
}

/// `ρ_ν(p)` from the blend's distance to the base manifold.
pub fn cutoff_rho(blend: &WhitneyBlend, nu: f64, p: &[f64]) -> Result<f64> {
    Ok(cutoff_profile(blend.distance(p)?, nu).0)
}

/// The extended top manifold `M̃ = (1 − ρ)M̂ + ρ S_μ M`.
pub struct ExtendedManifold {
    ladder: Arc<JetLadder>,
    blend: WhitneyBlend,
    cfg: ExtensionConfig,
}

impl std::fmt::Debug for ExtendedManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtendedManifold").field("cfg", &self.cfg).field("sites", &self.blend.sites.len()).finish()
    }
}

/// Value of `M̃` with the cutoff that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct ExtendedValue {
    pub value: Vec<f64>,
    pub rho: f64,
}

impl ExtendedManifold {
    /// Sample jets at the level-1 points `coords` and assemble the extension.
    /// Fails when the anchors are farther apart than `ν/2`.
    pub fn build(ladder: Arc<JetLadder>, coords: &[Vec<f64>], cfg: ExtensionConfig) -> Result<Self> {
        if !(cfg.nu > 0.0 && cfg.mu > 0.0) {
            return Err(Error::Input("ν and μ must be positive".into()));
        }
        if coords.is_empty() {
            return Err(Error::InsufficientSamples("no base points".into()));
        }
        let n1 = ladder.ladder().dim(1);
        let nn = ladder.top_dim();
        let sites: Vec<JetSite> = coords
            .par_iter()
            .map(|c| -> Result<JetSite> {
                let base = ladder.base_point(c)?;
                let jet = ladder.jet(&base, cfg.order)?;
                let chart = ladder.chart(1);
                let mut tangent = vec![0.0; nn * n1];
                for j in 0..n1 {
                    let mut e = vec![0.0; n1];
                    e[j] = 1.0;
                    let (_, dm) = chart.derivative(c, &e)?;
                    tangent[j * n1 + j] = 1.0;
                    for r in n1..nn {
                        tangent[r * n1 + j] = dm[r - n1];
                    }
                }
                Ok(JetSite { coords: c.clone(), point: base.projected(nn), tangent, jet })
            })
            .collect::<Result<_>>()?;
        let mut blend = WhitneyBlend::new(sites, 1.0, cfg.blend_power)?;
        let spacing = blend.spacing();
        if spacing > 0.5 * cfg.nu * (1.0 + 1e-9) {
            return Err(Error::Input(format!("sample spacing {spacing} exceeds ν/2 = {}", 0.5 * cfg.nu)));
        }
        blend.radius = 2.0 * spacing.max(f64::MIN_POSITIVE) + 2.0 * cfg.nu;
        Ok(Self { ladder, blend, cfg })
    }

    pub fn config(&self) -> &ExtensionConfig {
        &self.cfg
    }

    pub fn blend(&self) -> &WhitneyBlend {
        &self.blend
    }

    pub fn ladder(&self) -> &JetLadder {
        &self.ladder
    }

    /// Base dimension `N_n`.
    pub fn dim(&self) -> usize {
        self.ladder.top_dim()
    }

    /// `M_{N_n}` itself.
    pub fn top_chart(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.ladder.chart(self.ladder.levels()).value(p)
    }

    pub fn mollified(&self, p: &[f64]) -> Result<Vec<f64>> {
        let chart = self.ladder.chart(self.ladder.levels());
        mollify(&|q: &[f64]| chart.value(q), self.cfg.mu, p)
    }

    pub fn rho(&self, p: &[f64]) -> Result<f64> {
        cutoff_rho(&self.blend, self.cfg.nu, p)
    }

    pub fn eval(&self, p: &[f64]) -> Result<ExtendedValue> {
        let rho = self.rho(p)?;
        let value = if rho == 0.0 {
            self.blend.eval(p)?
        } else if rho == 1.0 {
            self.mollified(p)?
        } else {
            let a = self.blend.eval(p)?;
            let b = self.mollified(p)?;
            a.iter().zip(&b).map(|(x, y)| (1.0 - rho) * x + rho * y).collect()
        };
        Ok(ExtendedValue { value, rho })
    }

    /// `M̃(p)` and its Jacobian; `analytic` is false when finite differences
    /// were needed (outside the `ν`-tube).
    pub fn eval_with_gradient(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let rho = self.rho(p)?;
        if rho == 0.0 {
            // the tube has a collar: nearby points share ρ = 0 unless at its edge
            let h = self.cfg.fd_step;
            let inside = self.blend.distance(p)? + h < self.cfg.nu;
            if inside {
                let (v, g) = self.blend.eval_with_gradient(p)?;
                return Ok((v, g, true));
            }
        }
        let v = self.eval(p)?.value;
        let d = p.len();
        let m = v.len();
        let mut g = vec![0.0; m * d];
        let h = self.cfg.fd_step;
        for i in 0..d {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[i] += h;
            b[i] -= h;
            let (fa, fb) = (self.eval(&a)?.value, self.eval(&b)?.value);
            for o in 0..m {
                g[o * d + i] = (fa[o] - fb[o]) / (2.0 * h);
            }
        }
        Ok((v, g, false))
    }
}

/// `M̃(p)`.
pub fn extend_manifold(ext: &ExtendedManifold, p: &[f64]) -> Result<Vec<f64>> {
    Ok(ext.eval(p)?.value)
}

/// Nonlinearity `P_{N_n}F(u + M̃(u))` of the extended inertial form on `H_{N_n}`.
///
/// Evaluation failures (coverage) surface as non-finite values, which the
/// solvers report as divergence.
pub struct ExtendedInertialForm {
    ext: Arc<ExtendedManifold>,
    prob: SemilinearProblem,
    dim: usize,
}

impl ExtendedInertialForm {
    pub fn new(ext: Arc<ExtendedManifold>) -> Self {
        let prob = ext.ladder().problem().clone();
        let dim = ext.dim();
        Self { ext, prob, dim }
    }

    /// The extended inertial form as a problem on `H_{N_n}`.
    pub fn problem(ext: Arc<ExtendedManifold>) -> Result<SemilinearProblem> {
        let form = Self::new(ext);
        let op = SpectralOperator::new(form.prob.op.eigenvalues()[..form.dim].to_vec())?;
        let lip = form.prob.lipschitz;
        Ok(SemilinearProblem::new(op, Arc::new(form))?.with_lipschitz(lip))
    }

    fn lift(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut full = u.to_vec();
        if self.prob.nl.low_modes_closed(self.dim) {
            full.resize(self.prob.dim(), 0.0);
        } else {
            full.extend(self.ext.eval(u)?.value);
        }
        Ok(full)
    }
}

impl Nonlinearity for ExtendedInertialForm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, u: &[f64]) -> Vec<f64> {
        match self.lift(u) {
            Ok(full) => self.prob.nl.eval(&full)[..self.dim].to_vec(),
            Err(_) => vec![f64::NAN; self.dim],
        }
    }

    fn low_modes_closed(&self, n: usize) -> bool {
        self.prob.nl.low_modes_closed(n)
    }

    fn lipschitz(&self) -> f64 {
        self.prob.lipschitz
    }
}

/// Right-hand side `−Au + P_{N_n}F(u + M̃(u))` of the extended inertial form.
pub fn extended_if_rhs(ext: &Arc<ExtendedManifold>, u_base: &[f64]) -> Result<Vec<f64>> {
    check_dim("base state", u_base.len(), ext.dim())?;
    let form = ExtendedInertialForm::new(ext.clone());
    let full = form.lift(u_base)?;
    let f = form.prob.nl.eval(&full);
    let lam = form.prob.op.eigenvalues();
    Ok((0..ext.dim()).map(|i| f[i] - lam[i] * u_base[i]).collect())
}

/// Graph map with derivative used by [`modified_nonlinearity`].
pub trait GraphMap: Sync {
    /// Base dimension `N`.
    fn base_dim(&self) -> usize;
    /// Value (length `K − N`) and Jacobian (row-major `(K−N) × N`).
    fn value_and_gradient(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl GraphMap for ExtendedManifold {
    fn base_dim(&self) -> usize {
        self.dim()
    }
    fn value_and_gradient(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (v, g, _) = self.eval_with_gradient(p)?;
        Ok((v, g))
    }
}

/// `F̃(u)`: base part `P F(p + M̃(p))`, high part
/// `M̃′(p)[−Ap + P F(p + M̃(p))] + A_Q M̃(p)` with `p = P u`. The graph of
/// `M̃` is invariant for `u̇ + Au = F̃(u)` and the base equation decouples.
pub fn modified_nonlinearity(prob: &SemilinearProblem, graph: &dyn GraphMap, u: &[f64]) -> Result<Vec<f64>> {
    let k = prob.dim();
    let n = graph.base_dim();
    check_dim("state", u.len(), k)?;
    let p = &u[..n];
    let (m, g) = graph.value_and_gradient(p)?;
    let mut full = p.to_vec();
    full.extend(&m);
    let f = prob.nl.eval(&full);
    let lam = prob.op.eigenvalues();
    let pdot: Vec<f64> = (0..n).map(|i| f[i] - lam[i] * p[i]).collect();
    let mut out = f[..n].to_vec();
    for r in 0..(k - n) {
        let slope: f64 = (0..n).map(|i| g[r * n + i] * pdot[i]).sum();
        out.push(slope + lam[n + r] * m[r]);
    }
    Ok(out)
}

/// Graph defect `‖Q u(t) − M̃(P u(t))‖` along the modified flow.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub times: Vec<f64>,
    pub defects: Vec<f64>,
    pub max_defect: f64,
}

/// Start on the graph over `p`, integrate `u̇ + Au = F̃(u)` for `horizon`, and
/// record the graph defect at every output node.
pub fn modified_flow_invariance(
    prob: &SemilinearProblem,
    graph: &dyn GraphMap,
    p: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<(WeightedTrajectory, InvarianceReport)> {
    let n = graph.base_dim();
    check_dim("base point", p.len(), n)?;
    let (m, _) = graph.value_and_gradient(p)?;
    let mut u0 = p.to_vec();
    u0.extend(m);
    let rhs = |u: &[f64]| modified_nonlinearity(prob, graph, u);
    let opts = ForwardOptions { richardson: true, ..ForwardOptions::new(dt) };
    let traj = integrate_exponential(prob.op.eigenvalues(), &rhs, &u0, horizon, opts)?;
    let mut times = Vec::with_capacity(traj.nodes());
    let mut defects = Vec::with_capacity(traj.nodes());
    for j in 0..traj.nodes() {
        let u = traj.at(j);
        let (m, _) = graph.value_and_gradient(&u[..n])?;
        times.push(traj.grid.time(j));
        defects.push(norm(&sub(&u[n..], &m)));
    }
    let max_defect = defects.iter().copied().fold(0.0, f64::max);
    Ok((traj, InvarianceReport { times, defects, max_defect }))
}

/// Sup-norm gaps `‖M̃ − M‖` and `‖M̃′ − M′‖` (finite differences) over probes.
#[derive(Debug, Clone, Serialize)]
pub struct ClosenessReport {
    pub nu: f64,
    pub c0_gap: f64,
    pub c1_gap: f64,
}

pub fn closeness(ext: &ExtendedManifold, probes: &[Vec<f64>]) -> Result<ClosenessReport> {
    let h = ext.cfg.fd_step;
    let gaps: Vec<(f64, f64)> = probes
        .par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let diff = |q: &[f64]| -> Result<Vec<f64>> { Ok(sub(&ext.eval(q)?.value, &ext.top_chart(q)?)) };
            let c0 = norm(&diff(p)?);
            let mut c1 = 0.0f64;
            for i in 0..p.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                a[i] += h;
                b[i] -= h;
                let d: Vec<f64> = sub(&diff(&a)?, &diff(&b)?).iter().map(|v| v / (2.0 * h)).collect();
                c1 = c1.max(norm(&d));
            }
            Ok((c0, c1))
        })
        .collect::<Result<_>>()?;
    let c0_gap = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let c1_gap = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(ClosenessReport { nu: ext.cfg.nu, c0_gap, c1_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jetcalc::SymMultiForm;

    /// Exact jets of q(x) = (x₀² − x₁, x₀x₁) at `p` (non-factorial storage).
    fn poly_jet(p: &[f64]) -> Jet {
        let c0 = SymMultiForm::constant(2, &[p[0] * p[0] - p[1], p[0] * p[1]]);
        let c1 = SymMultiForm::symmetrize(1, 2, 2, |idx| match idx[0] {
            0 => vec![2.0 * p[0], p[1]],
            _ => vec![-1.0, p[0]],
        });
        let c2 = SymMultiForm::symmetrize(2, 2, 2, |idx| {
            let mut s = idx.to_vec();
            s.sort();
            match (s[0], s[1]) {
                (0, 0) => vec![2.0, 0.0],
                (0, 1) => vec![0.0, 1.0],
                _ => vec![0.0, 0.0],
            }
        });
        Jet::new(vec![c0, c1, c2], true).unwrap()
    }

    fn poly_blend() -> WhitneyBlend {
        let sites = (0..9)
            .map(|i| {
                let p = vec![0.1 * i as f64, 0.05 * (i as f64 * 0.7).sin()];
                JetSite { coords: vec![p[0]], tangent: vec![1.0, 0.0], jet: poly_jet(&p), point: p }
            })
            .collect();
        WhitneyBlend::new(sites, 0.35, 4).unwrap()
    }

    #[test]
    fn blend_reproduces_polynomials() {
        let b = poly_blend();
        for q in [[0.23, 0.04], [0.51, -0.1], [0.0, 0.0], [0.77, 0.12]] {
            let (v, g) = b.eval_with_gradient(&q).unwrap();
            let want = [q[0] * q[0] - q[1], q[0] * q[1]];
            assert!((v[0] - want[0]).abs() < 1e-10 && (v[1] - want[1]).abs() < 1e-10);
            let gw = [2.0 * q[0], -1.0, q[1], q[0]];
            for (a, b) in g.iter().zip(gw) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(matches!(b.eval(&[5.0, 5.0]), Err(Error::Coverage(_))));
    }

    #[test]
    fn blend_interpolates_jets_at_sites() {
        // jets of different polynomials at each site: still exact at anchors
        let mut b = poly_blend();
        for (i, s) in b.sites.iter_mut().enumerate() {
            let bump = SymMultiForm::constant(2, &[0.01 * i as f64, 0.0]);
            let mut comps = s.jet.components().to_vec();
            comps[0] = comps[0].add(&bump).unwrap();
            s.jet = Jet::new(comps, true).unwrap();
        }
        for s in &b.sites {
            let (v, g) = b.eval_with_gradient(&s.point).unwrap();
            let (jv, jg) = s.jet.eval_with_gradient(&[0.0, 0.0]).unwrap();
            assert!(norm(&sub(&v, &jv)) < 1e-12);
            assert!(norm(&sub(&g, &jg)) < 1e-12);
            // divided difference at the site agrees with the jet's linear part
            let h = 1e-6;
            let mut q = s.point.clone();
            q[0] += h;
            let vp = b.eval(&q).unwrap();
            let mut r = s.point.clone();
            r[0] -= h;
            let vm = b.eval(&r).unwrap();
            for o in 0..2 {
                assert!(((vp[o] - vm[o]) / (2.0 * h) - jg[o * 2]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cutoff_plateaus_and_gradient_bound() {
        let nu = 0.1;
        assert_eq!(cutoff_profile(0.0, nu).0, 0.0);
        assert_eq!(cutoff_profile(0.3, nu).0, 1.0);
        let mut prev = 0.0;
        let h = 1e-6;
        for i in 0..=300 {
            let d = 0.001 * i as f64;
            let (r, _) = cutoff_profile(d, nu);
            assert!(r >= prev);
            prev = r;
            let fd = (cutoff_profile(d + h, nu).0 - cutoff_profile(d - h, nu).0) / (2.0 * h);
            assert!(fd.abs() <= 4.0 / nu);
        }
    }

    #[test]
    fn distance_uses_tangent_plane() {
        // anchors on the parabola y = x² with their exact tangents (1, 2x)
        let sites = (0..9)
            .map(|i| {
                let x = 0.1 * i as f64;
                let p = vec![x, x * x];
                JetSite { coords: vec![x], tangent: vec![1.0, 2.0 * x], jet: poly_jet(&p), point: p }
            })
            .collect();
        let b = WhitneyBlend::new(sites, 0.35, 4).unwrap();
        // offset along the normal at x = 0.4 is recovered exactly
        let nrm = [-0.8 / 0.8f64.hypot(1.0), 1.0 / 0.8f64.hypot(1.0)];
        let q = [0.4 + 0.03 * nrm[0], 0.16 + 0.03 * nrm[1]];
        assert!((b.distance(&q).unwrap() - 0.03).abs() < 1e-12);
        // between anchors the tangent-plane step leaves an O(h²) residue
        let d = b.distance(&[0.42, 0.42 * 0.42]).unwrap();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn mollifier_preserves_constants_and_linear_maps() {
        let c = mollify(&|_q: &[f64]| Ok(vec![2.5, -1.0]), 0.1, &[0.3, 0.4]).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-14 && (c[1] + 1.0).abs() < 1e-14);
        let l = mollify(&|q: &[f64]| Ok(vec![3.0 * q[0] - q[1]]), 0.2, &[0.3, 0.4]).unwrap();
        assert!((l[0] - 0.5).abs() < 1e-12);
        // O(μ²) for a smooth function: halving μ cuts the gap by ≈ 4
        let f = |q: &[f64]| Ok(vec![(q[0] * 3.0).sin() * q[1].exp()]);
        let gap = |mu: f64| (mollify(&f, mu, &[0.3, 0.4]).unwrap()[0] - f(&[0.3, 0.4]).unwrap()[0]).abs();
        let ratio = gap(0.1) / gap(0.05);
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    struct Flat;
    impl GraphMap for Flat {
        fn base_dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((vec![p[0] * p[0], 0.0], vec![2.0 * p[0], 0.0]))
        }
    }

    struct Zero;
    impl Nonlinearity for Zero {
        fn dim(&self) -> usize {
            3
        }
        fn eval(&self, _u: &[f64]) -> Vec<f64> {
            vec![0.0; 3]
        }
        fn lipschitz(&self) -> f64 {
            0.0
        }
    }

    #[test]
    fn modified_nonlinearity_specializations() {
        let op = SpectralOperator::new(vec![1.0, 4.0, 9.0]).unwrap();
        let prob = SemilinearProblem::new(op, Arc::new(Zero)).unwrap();
        struct Null;
        impl GraphMap for Null {
            fn base_dim(&self) -> usize {
                1
            }
            fn value_and_gradient(&self, _p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
                Ok((vec![0.0, 0.0], vec![0.0, 0.0]))
            }
        }
        assert_eq!(modified_nonlinearity(&prob, &Null, &[0.3, 0.1, 0.2]).unwrap(), vec![0.0; 3]);
        // zero slope point: high part reduces to A M̃
        let f = modified_nonlinearity(&prob, &Flat, &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.0, 0.0, 0.0]);
        let (_, rep) = modified_flow_invariance(&prob, &Flat, &[0.5], 10.0, 0.01).unwrap();
        assert!(rep.max_defect < 1e-6, "{}", rep.max_defect);
    }
}
