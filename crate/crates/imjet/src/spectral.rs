//! Diagonal linear part: eigenvalue ladders, spectral projectors, gap
//! conditions and the choice of weight exponents.
//!
//! Modes are numbered from 1 as in the usual eigenvalue notation; vectors
//! store mode `n` at index `n − 1`. `P_N` keeps modes `1..=N` and `Q_N`
//! keeps the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strict-inequality margin used throughout the ladder construction.
pub const LADDER_MARGIN: f64 = 1e-9;

/// Default Hölder margin per level before geometric reduction.
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Default ratio `K / N_n` between the Galerkin truncation and the top
/// ladder dimension, so the fast modes are resolved.
pub const DEFAULT_TRUNCATION_FACTOR: f64 = 2.0;

/// `A = diag(λ₁ ≤ … ≤ λ_K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralOperator {
    eigenvalues: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl SpectralOperator {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.len() < 2 {
            return Err(Error::Input("spectral operator needs at least two modes".into()));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Input("eigenvalues must be positive and finite".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("eigenvalues must be nondecreasing".into()));
        }
        Ok(Self { eigenvalues, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.eigenvalues.len() {
            return Err(Error::Input("one label per mode required".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// `λ_k = a·k²`, `k = 1..=K` (Dirichlet Laplacian on an interval of length π).
    pub fn squares(a: f64, modes: usize) -> Result<Self> {
        Self::new((1..=modes).map(|k| a * (k * k) as f64).collect())
    }

    /// `λ_k = 2^{k−1}`.
    pub fn dyadic(modes: usize) -> Result<Self> {
        Self::new((0..modes).map(|k| 2f64.powi(k as i32)).collect())
    }

    /// Truncation dimension `K`.
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// `λ_n` for `1 ≤ n ≤ K`.
    pub fn eigenvalue(&self, n: usize) -> f64 {
        self.eigenvalues[n - 1]
    }

    /// `A u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.eigenvalues).map(|(x, l)| x * l).collect()
    }

    fn check_split(&self, n: usize) -> Result<()> {
        if n > self.dim() {
            return Err(Error::Input(format!("projector index {n} exceeds truncation {}", self.dim())));
        }
        Ok(())
    }

    /// `P_N u` (modes above `N` zeroed).
    pub fn project_low(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_split(n)?;
        crate::error::check_dim("projected vector", u.len(), self.dim())?;
        Ok(u.iter().enumerate().map(|(i, x)| if i < n { *x } else { 0.0 }).collect())
    }

    /// `Q_N u` (modes up to `N` zeroed).
    pub fn project_high(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_split(n)?;
        crate::error::check_dim("projected vector", u.len(), self.dim())?;
        Ok(u.iter().enumerate().map(|(i, x)| if i < n { 0.0 } else { *x }).collect())
    }

    /// `λ_{N+1} − λ_N`.
    pub fn gap(&self, n: usize) -> f64 {
        self.eigenvalue(n + 1) - self.eigenvalue(n)
    }

    /// Open exponent window `(λ_N + L, λ_{N+1} − L)`; may be empty.
    pub fn theta_window(&self, n: usize, lipschitz: f64) -> (f64, f64) {
        (self.eigenvalue(n) + lipschitz, self.eigenvalue(n + 1) - lipschitz)
    }

    /// `1 / min(θ − λ_N, λ_{N+1} − θ)`: norm of the Green operator in the
    /// `e^{θt}`-weighted space.
    pub fn green_norm(&self, n: usize, theta: f64) -> f64 {
        1.0 / (theta - self.eigenvalue(n)).min(self.eigenvalue(n + 1) - theta)
    }
}

/// Smallest `N` with `λ_{N+1} − λ_N > 2L`, if any within the truncation.
pub fn first_gap_index(op: &SpectralOperator, lipschitz: f64) -> Option<usize> {
    (1..op.dim()).find(|&n| op.gap(n) > 2.0 * lipschitz)
}

/// One rung of a gap ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderLevel {
    #[serde(rename = "N")]
    pub dim: usize,
    pub gap: f64,
    pub theta_window: (f64, f64),
    pub theta: f64,
}

/// Dimensions `N₁ < … < N_n` with weight exponents `θ₁ < … < θ_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLadder {
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub levels: Vec<LadderLevel>,
    /// Hölder margin actually used (after any reduction).
    pub epsilon: f64,
    /// Common shrink factor applied to every θ window (1 = midpoints).
    pub shrink: f64,
    pub feasible: bool,
}

impl GapLadder {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `N_k`, `k` counted from 1.
    pub fn dim(&self, k: usize) -> usize {
        self.levels[k - 1].dim
    }

    /// `θ_k`, `k` counted from 1.
    pub fn theta(&self, k: usize) -> f64 {
        self.levels[k - 1].theta
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim).collect()
    }

    pub fn top_dim(&self) -> usize {
        self.levels.last().map(|l| l.dim).unwrap_or(0)
    }

    /// Exponent for the degree-`degree` equation at level `level ≥ 2`:
    /// `θ_level + (degree − 1)·θ_{level−1}`.
    pub fn jet_exponent(&self, level: usize, degree: usize) -> f64 {
        if level == 1 || degree <= 1 {
            return self.theta(level);
        }
        self.theta(level) + (degree as f64 - 1.0) * self.theta(level - 1)
    }

    /// Require `K ≥ factor·N_n` for a truncation of `modes` modes.
    pub fn check_truncation(&self, modes: usize, factor: f64) -> Result<()> {
        let need = (factor * self.top_dim() as f64).ceil() as usize;
        if modes < need {
            return Err(Error::InfeasibleLadder {
                level: self.len(),
                reason: format!("truncation K = {modes} below {factor}·N = {need} for N = {}", self.top_dim()),
            });
        }
        Ok(())
    }

    /// Truncate to the first `n` levels.
    pub fn truncated(&self, n: usize) -> Self {
        let mut l = self.clone();
        l.levels.truncate(n);
        l
    }
}

/// Whether `N` satisfies the defining inequality of ladder level `level`
/// (1-based) given the previous rungs.
fn level_condition(op: &SpectralOperator, lipschitz: f64, prev: &[usize], n: usize) -> bool {
    let lam = |k: usize| op.eigenvalue(k);
    match prev.len() {
        0 => op.gap(n) > 2.0 * lipschitz + LADDER_MARGIN,
        1 => op.gap(n) - lam(prev[0]) > 3.0 * lipschitz + LADDER_MARGIN,
        k => {
            let nk = prev[k - 1];
            lam(n) + lipschitz + k as f64 * (lam(nk + 1) - lipschitz) < lam(n + 1) - lipschitz - LADDER_MARGIN
        }
    }
}

/// Minimal dimensions for an `n`-level ladder and a compatible θ chain.
///
/// Dimensions: `N₁` from `λ_{N+1} − λ_N > 2L`; `N₂` from
/// `λ_{N+1} − λ_N − λ_{N₁} > 3L`; higher rungs from
/// `λ_N + L + k(λ_{N_k+1} − L) < λ_{N+1} − L`. The θ chain starts at the
/// window midpoints and shrinks every window toward its lower end by a
/// common factor (bisection) until `θ_{k+1} + kθ_k + ε < λ_{N_{k+1}+1} − L`
/// at every level; `ε` is halved when no factor works.
pub fn gap_ladder(op: &SpectralOperator, lipschitz: f64, n: usize, epsilon: f64) -> Result<GapLadder> {
    if n == 0 {
        return Err(Error::Input("ladder needs at least one level".into()));
    }
    if !(lipschitz >= 0.0) {
        return Err(Error::Input("Lipschitz constant must be nonnegative".into()));
    }
    let mut dims: Vec<usize> = Vec::with_capacity(n);
    for level in 1..=n {
        let start = dims.last().map(|d| d + 1).unwrap_or(1);
        let found = (start..op.dim()).find(|&cand| level_condition(op, lipschitz, &dims, cand));
        match found {
            Some(d) => dims.push(d),
            None => {
                return Err(Error::InfeasibleLadder {
                    level,
                    reason: format!("no admissible dimension below truncation K = {}", op.dim()),
                })
            }
        }
    }
    let windows: Vec<(f64, f64)> = dims.iter().map(|&d| op.theta_window(d, lipschitz)).collect();
    let thetas_at = |s: f64| -> Vec<f64> {
        windows.iter().map(|(lo, hi)| lo + s * (0.5 * (lo + hi) - lo)).collect()
    };
    let admissible = |s: f64, eps: f64| -> bool {
        let th = thetas_at(s);
        (1..n).all(|k| {
            let upper = op.eigenvalue(dims[k] + 1) - lipschitz;
            th[k] + k as f64 * th[k - 1] + eps < upper - LADDER_MARGIN
        })
    };
    let mut eps = epsilon;
    let mut chosen = None;
    for _ in 0..40 {
        if admissible(1.0, eps) {
            chosen = Some(1.0);
            break;
        }
        let tiny = 1e-9;
        if admissible(tiny, eps) {
            let (mut lo, mut hi) = (tiny, 1.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if admissible(mid, eps) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            chosen = Some(lo);
            break;
        }
        eps *= 0.5;
    }
    let shrink = match chosen {
        Some(s) => s,
        None => {
            let failing = (1..n)
                .find(|&k| {
                    let th = thetas_at(1e-9);
                    th[k] + k as f64 * th[k - 1] >= op.eigenvalue(dims[k] + 1) - lipschitz - LADDER_MARGIN
                })
                .map(|k| k + 1)
                .unwrap_or(n);
            return Err(Error::InfeasibleLadder {
                level: failing,
                reason: "no admissible exponent chain".into(),
            });
        }
    };
    let thetas = thetas_at(shrink);
    let levels = dims
        .iter()
        .zip(windows)
        .zip(thetas)
        .map(|((&d, w), th)| LadderLevel { dim: d, gap: op.gap(d), theta_window: w, theta: th })
        .collect();
    Ok(GapLadder { lipschitz, levels, epsilon: eps, shrink, feasible: true })
}

/// `λ_{N+1} − (n+ε)λ_N > (n+1+ε)L`: the single-gap condition for a
/// `C^{n,ε}` manifold.
pub fn check_holder_gap(op: &SpectralOperator, n_dim: usize, lipschitz: f64, order: usize, epsilon: f64) -> bool {
    if n_dim == 0 || n_dim >= op.dim() {
        return false;
    }
    let ord = order as f64;
    op.eigenvalue(n_dim + 1) - (ord + epsilon) * op.eigenvalue(n_dim) > (ord + 1.0 + epsilon) * lipschitz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_margin_scales_with_the_top_dimension() {
        let op = SpectralOperator::squares(1.0, 9).unwrap();
        let ladder = gap_ladder(&op, 3.0, 1, DEFAULT_EPSILON).unwrap();
        assert_eq!(ladder.top_dim(), 3);
        assert!(ladder.check_truncation(6, DEFAULT_TRUNCATION_FACTOR).is_ok());
        assert!(matches!(
            ladder.check_truncation(5, DEFAULT_TRUNCATION_FACTOR),
            Err(Error::InfeasibleLadder { level: 1, .. })
        ));
        assert!(ladder.check_truncation(9, 3.0).is_ok());
        assert!(ladder.check_truncation(8, 3.0).is_err());
    }

    #[test]
    fn projectors_split_coordinates() {
        let op = SpectralOperator::squares(1.0, 3).unwrap();
        let u = [1.0, 2.0, 3.0];
        assert_eq!(op.project_low(&u, 2).unwrap(), vec![1.0, 2.0, 0.0]);
        assert_eq!(op.project_high(&u, 2).unwrap(), vec![0.0, 0.0, 3.0]);
        assert!(op.project_high(&u, 3).unwrap().iter().all(|x| *x == 0.0));
        assert!(op.project_low(&u, 4).is_err());
    }

    #[test]
    fn operator_validation() {
        assert!(SpectralOperator::new(vec![1.0]).is_err());
        assert!(SpectralOperator::new(vec![2.0, 1.0]).is_err());
        assert!(SpectralOperator::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn first_gap_on_squares() {
        let op = SpectralOperator::squares(1.0, 10).unwrap();
        assert_eq!(first_gap_index(&op, 3.0), Some(3));
        assert_eq!(first_gap_index(&op, 0.0), Some(1));
        let unit = SpectralOperator::new((1..=10).map(|k| k as f64).collect()).unwrap();
        assert_eq!(first_gap_index(&unit, 1.0), None);
    }

    #[test]
    fn single_level_midpoint() {
        let op = SpectralOperator::squares(1.0, 10).unwrap();
        let l = gap_ladder(&op, 3.0, 1, DEFAULT_EPSILON).unwrap();
        assert_eq!(l.dims(), vec![3]);
        assert_eq!(l.levels[0].theta_window, (12.0, 13.0));
        assert!((l.theta(1) - 12.5).abs() < 1e-15);
    }

    #[test]
    fn dyadic_ladder_levels_and_minimality() {
        let op = SpectralOperator::dyadic(8).unwrap();
        let l = gap_ladder(&op, 0.1, 3, DEFAULT_EPSILON).unwrap();
        assert_eq!(l.dims(), vec![1, 2, 5]);
        // minimality: one below each rung violates its condition
        let dims = l.dims();
        for k in 1..dims.len() {
            if dims[k] - 1 > dims[k - 1] {
                assert!(!level_condition(&op, 0.1, &dims[..k], dims[k] - 1));
            }
        }
        for k in 1..l.len() {
            let s = l.theta(k + 1) + k as f64 * l.theta(k) + l.epsilon;
            let (lo, hi) = op.theta_window(l.dim(k + 1), 0.1);
            assert!(s > lo && s < hi);
        }
    }

    #[test]
    fn ladder_beyond_truncation_names_level() {
        let op = SpectralOperator::dyadic(4).unwrap();
        match gap_ladder(&op, 0.1, 3, DEFAULT_EPSILON) {
            Err(Error::InfeasibleLadder { level, .. }) => assert_eq!(level, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn holder_gap_examples() {
        let op = SpectralOperator::squares(1.0, 40).unwrap();
        // 9 − 1.05·4 = 4.8 < 2.05·3; 16 − 1.05·9 = 6.55 > 6.15
        assert!(!check_holder_gap(&op, 2, 3.0, 1, 0.05));
        assert!(check_holder_gap(&op, 3, 3.0, 1, 0.05));
        assert!(check_holder_gap(&op, 7, 3.0, 1, 0.05));
        // (N+1)² > 2.05 N² only for N ≤ 2
        assert!(check_holder_gap(&op, 2, 0.0, 2, 0.05));
        assert!((3..39).all(|n| !check_holder_gap(&op, n, 0.0, 2, 0.05)));
        let dy = SpectralOperator::dyadic(12).unwrap();
        // ratio 2 < n + ε for n = 2: fails everywhere
        assert!((1..11).all(|n| !check_holder_gap(&dy, n, 0.01, 2, 0.05)));
        assert!((3..11).all(|n| check_holder_gap(&dy, n, 0.01, 1, 0.05)));
    }
}
