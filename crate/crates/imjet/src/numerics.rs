//! Small numerical helpers shared by the solvers: polynomial smoothsteps,
//! Gauss–Legendre rules, log-log regression, vector kernels and truncated
//! univariate series arithmetic.

/// Polynomial smoothstep of continuity order `m`: 0 for x ≤ 0, 1 for x ≥ 1,
/// with `m` derivatives vanishing at both seams. `m = 2` is the quintic
/// `10x³ − 15x⁴ + 6x⁵`.
#[derive(Debug, Clone)]
pub struct Smoothstep {
    order: usize,
    /// Monomial coefficients of the interior polynomial.
    coeffs: Vec<f64>,
}

impl Smoothstep {
    pub fn new(order: usize) -> Self {
        // S(x) = x^{m+1} Σ_{j=0}^{m} C(m+j, j) (1−x)^j, expanded into monomials.
        let m = order;
        let mut coeffs = vec![0.0; 2 * m + 2];
        for j in 0..=m {
            let c = binomial(m + j, j);
            // (1−x)^j = Σ_i C(j,i)(−x)^i
            for i in 0..=j {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                coeffs[m + 1 + i] += c * binomial(j, i) * s;
            }
        }
        Self { order, coeffs }
    }

    pub fn quintic() -> Self {
        Self::new(2)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
        }
    }

    /// Value and derivatives `0..=n` at `x` (one-sided zeros on the plateaus).
    pub fn derivatives(&self, x: f64, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n + 1];
        if x <= 0.0 {
            return out;
        }
        if x >= 1.0 {
            out[0] = 1.0;
            return out;
        }
        let mut c = self.coeffs.clone();
        for slot in out.iter_mut() {
            *slot = c.iter().rev().fold(0.0, |acc, v| acc * x + v);
            // differentiate the coefficient vector in place
            let mut d = vec![0.0; c.len().saturating_sub(1)];
            for (i, di) in d.iter_mut().enumerate() {
                *di = c[i + 1] * (i + 1) as f64;
            }
            if d.is_empty() {
                d.push(0.0);
            }
            c = d;
        }
        out
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.derivatives(x, 1)[1]
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r.round()
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |a, i| a * i as f64)
}

/// Five-point Gauss–Legendre nodes on [−1, 1].
pub const GAUSS5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
/// Matching weights (sum to 2).
pub const GAUSS5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Composite 5-point Gauss–Legendre quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GAUSS5_NODES.iter().zip(GAUSS5_WEIGHTS.iter()) {
            s += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * s
}

/// Least-squares fit `ln y = slope · ln x + c`. Returns `(slope, c)`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    linear_fit(&pts)
}

/// Least-squares line through `(x, y)` points. Returns `(slope, intercept)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += s·x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Truncated product of two scalar series (coefficients by degree).
pub fn series_mul(a: &[f64], b: &[f64], deg: usize) -> Vec<f64> {
    let mut out = vec![0.0; deg + 1];
    for (i, ai) in a.iter().enumerate().take(deg + 1) {
        if *ai == 0.0 {
            continue;
        }
        for (j, bj) in b.iter().enumerate().take(deg + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Taylor composition `Σ_m d[m]/m! · y(s)^m` truncated at `deg`, where `d`
/// holds derivatives of the outer function at the base point and `y` is a
/// series with zero constant term.
pub fn series_compose(derivs: &[f64], y: &[f64], deg: usize) -> Vec<f64> {
    let top = derivs.len().saturating_sub(1).min(deg);
    let mut r = vec![0.0; deg + 1];
    r[0] = derivs[top] / factorial(top);
    for m in (0..top).rev() {
        r = series_mul(&r, y, deg);
        r[0] += derivs[m] / factorial(m);
    }
    r
}
