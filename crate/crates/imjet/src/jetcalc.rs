//! Exact finite-dimensional multilinear algebra.
//!
//! A symmetric `k`-linear map `X^k → Y` is stored by its coefficient tensor
//! restricted to nondecreasing index tuples (multisets), in graded
//! lexicographic order; symmetry is therefore structural. A [`Jet`] is a
//! list of such forms `P₀ … P_n` representing the polynomial
//!
//! ```text
//!     J(ξ) = Σ_k (1/k!) P_k[ξ, …, ξ]
//! ```
//!
//! (the `1/k!` is applied at evaluation time; a jet may instead carry
//! plain Taylor coefficients, see [`Jet::factorial`]).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{binomial, factorial, loglog_fit, norm};

/// Largest order supported by [`extract_components`]; beyond it the
/// Vandermonde system on equispaced nodes loses too many digits.
pub const MAX_EXTRACTION_ORDER: usize = 6;

/// Random unit directions used by [`SymMultiForm::norm_estimate`].
pub const DEFAULT_NORM_SAMPLES: usize = 256;

/// Index bookkeeping for multisets of a fixed size over `dim` symbols.
#[derive(Debug)]
struct MultisetTable {
    dim: usize,
    tuples: Vec<Vec<usize>>,
    /// `k! / α!` for each multiset α (number of orderings of the tuple).
    multinom: Vec<f64>,
    rank: HashMap<Vec<usize>, usize>,
}

impl MultisetTable {
    fn build(dim: usize, degree: usize) -> Self {
        let mut tuples = Vec::new();
        let mut cur = Vec::with_capacity(degree);
        fn rec(dim: usize, left: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if left == 0 {
                out.push(cur.clone());
                return;
            }
            for i in start..dim {
                cur.push(i);
                rec(dim, left - 1, i, cur, out);
                cur.pop();
            }
        }
        rec(dim, degree, 0, &mut cur, &mut tuples);
        let multinom = tuples
            .iter()
            .map(|t| {
                let mut m = factorial(t.len());
                let mut run = 1usize;
                for w in 1..=t.len() {
                    if w < t.len() && t[w] == t[w - 1] {
                        run += 1;
                    } else {
                        m /= factorial(run);
                        run = 1;
                    }
                }
                m
            })
            .collect();
        let rank = tuples.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { dim, tuples, multinom, rank }
    }

    fn len(&self) -> usize {
        self.tuples.len()
    }

    fn rank_of_unsorted(&self, idx: &[usize]) -> usize {
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.rank[&key]
    }
}

fn table(dim: usize, degree: usize) -> Arc<MultisetTable> {
    static TABLES: OnceLock<Mutex<HashMap<(usize, usize), Arc<MultisetTable>>>> = OnceLock::new();
    let map = TABLES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = map.lock().expect("multiset table cache poisoned");
    guard
        .entry((dim, degree))
        .or_insert_with(|| Arc::new(MultisetTable::build(dim, degree)))
        .clone()
}

/// Number of multisets of size `degree` over `dim` symbols, `C(dim+degree−1, degree)`.
pub fn multiset_count(dim: usize, degree: usize) -> usize {
    if dim == 0 {
        return usize::from(degree == 0);
    }
    binomial(dim + degree - 1, degree) as usize
}

/// Nondecreasing index tuples of size `degree` over `0..dim` in graded-lex order.
pub fn multisets(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    table(dim, degree).tuples.clone()
}

/// A symmetric `degree`-linear map `R^dim_in × … → R^dim_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMultiForm {
    degree: usize,
    dim_in: usize,
    dim_out: usize,
    /// Row-major `dim_out × multiset_count(dim_in, degree)`.
    coeffs: Vec<f64>,
}

impl SymMultiForm {
    pub fn zeros(degree: usize, dim_in: usize, dim_out: usize) -> Self {
        let n = multiset_count(dim_in, degree);
        Self { degree, dim_in, dim_out, coeffs: vec![0.0; n * dim_out] }
    }

    pub fn from_coeffs(degree: usize, dim_in: usize, dim_out: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_dim("form coefficients", coeffs.len(), multiset_count(dim_in, degree) * dim_out)?;
        Ok(Self { degree, dim_in, dim_out, coeffs })
    }

    /// Degree-0 form holding a constant vector.
    pub fn constant(dim_in: usize, value: &[f64]) -> Self {
        Self { degree: 0, dim_in, dim_out: value.len(), coeffs: value.to_vec() }
    }

    /// Build from the full (not necessarily symmetric) tensor entry function;
    /// the result is its symmetrization.
    pub fn symmetrize<F: Fn(&[usize]) -> Vec<f64>>(degree: usize, dim_in: usize, dim_out: usize, entry: F) -> Self {
        let tab = table(dim_in, degree);
        let mut out = Self::zeros(degree, dim_in, dim_out);
        let n = tab.len();
        let mut counts = vec![0.0; n];
        for_each_tuple(dim_in, degree, |idx| {
            let r = tab.rank_of_unsorted(idx);
            let v = entry(idx);
            for o in 0..dim_out {
                out.coeffs[o * n + r] += v[o];
            }
            counts[r] += 1.0;
        });
        for o in 0..dim_out {
            for r in 0..n {
                out.coeffs[o * n + r] /= counts[r];
            }
        }
        out
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }
    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Tensor entry for an index tuple (any order).
    pub fn entry(&self, o: usize, idx: &[usize]) -> f64 {
        let tab = table(self.dim_in, self.degree);
        self.coeffs[o * tab.len() + tab.rank_of_unsorted(idx)]
    }

    /// Diagonal evaluation `P[ξ, …, ξ]`.
    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_dim("form argument", xi.len(), self.dim_in)?;
        let tab = table(self.dim_in, self.degree);
        let n = tab.len();
        let mut out = vec![0.0; self.dim_out];
        for (r, t) in tab.tuples.iter().enumerate() {
            let mono: f64 = t.iter().map(|&i| xi[i]).product::<f64>() * tab.multinom[r];
            if mono == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().enumerate() {
                *v += self.coeffs[o * n + r] * mono;
            }
        }
        Ok(out)
    }

    /// Jacobian of `ξ ↦ P[ξ, …, ξ]`, row-major `dim_out × dim_in`.
    pub fn gradient(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_dim("form argument", xi.len(), self.dim_in)?;
        let tab = table(self.dim_in, self.degree);
        let n = tab.len();
        let d = self.dim_in;
        let mut out = vec![0.0; self.dim_out * d];
        for (r, t) in tab.tuples.iter().enumerate() {
            for p in 0..t.len() {
                if p > 0 && t[p] == t[p - 1] {
                    continue;
                }
                let i = t[p];
                let mult = t.iter().filter(|&&j| j == i).count() as f64;
                let rest: f64 = t.iter().enumerate().filter(|(q, _)| *q != p).map(|(_, &j)| xi[j]).product();
                let g = tab.multinom[r] * mult * rest;
                if g == 0.0 {
                    continue;
                }
                for o in 0..self.dim_out {
                    out[o * d + i] += self.coeffs[o * n + r] * g;
                }
            }
        }
        Ok(out)
    }

    /// Multilinear evaluation `P[a₁, …, a_k]` on distinct arguments.
    pub fn eval_multi(&self, args: &[&[f64]]) -> Result<Vec<f64>> {
        if args.len() != self.degree {
            return Err(Error::Input(format!(
                "form of degree {} given {} arguments",
                self.degree,
                args.len()
            )));
        }
        for a in args {
            check_dim("form argument", a.len(), self.dim_in)?;
        }
        let tab = table(self.dim_in, self.degree);
        let n = tab.len();
        let mut out = vec![0.0; self.dim_out];
        for_each_tuple(self.dim_in, self.degree, |idx| {
            let w: f64 = idx.iter().zip(args).map(|(&i, a)| a[i]).product();
            if w == 0.0 {
                return;
            }
            let r = tab.rank_of_unsorted(idx);
            for (o, v) in out.iter_mut().enumerate() {
                *v += self.coeffs[o * n + r] * w;
            }
        });
        Ok(out)
    }

    /// Polarization of this form's diagonal; equals [`Self::eval_multi`].
    pub fn polarize(&self, args: &[&[f64]]) -> Result<Vec<f64>> {
        polarize(&|x: &[f64]| self.eval(x).expect("checked dimension"), self.degree, args)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut f = self.clone();
        f.coeffs.iter_mut().for_each(|c| *c *= s);
        f
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.degree, self.dim_in, self.dim_out) != (other.degree, other.dim_in, other.dim_out) {
            return Err(Error::Input("adding forms of different shapes".into()));
        }
        let mut f = self.clone();
        f.coeffs.iter_mut().zip(&other.coeffs).for_each(|(a, b)| *a += b);
        Ok(f)
    }

    /// Keep only output rows `range` (e.g. a high-mode projection).
    pub fn select_outputs(&self, rows: std::ops::Range<usize>) -> Self {
        let n = multiset_count(self.dim_in, self.degree);
        let coeffs = self.coeffs[rows.start * n..rows.end * n].to_vec();
        Self { degree: self.degree, dim_in: self.dim_in, dim_out: rows.len(), coeffs }
    }

    /// `sup_{‖ξ‖=1} ‖P[ξ^k]‖` estimated from `samples` random unit directions.
    pub fn norm_estimate<R: Rng>(&self, samples: usize, rng: &mut R) -> f64 {
        let mut best: f64 = 0.0;
        let mut xi = vec![0.0; self.dim_in];
        for _ in 0..samples {
            for x in xi.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let r = norm(&xi);
            if r == 0.0 {
                continue;
            }
            xi.iter_mut().for_each(|x| *x /= r);
            best = best.max(norm(&self.eval(&xi).expect("dimension")));
        }
        best
    }

    /// Least-squares fit of the degree-`degree` form whose diagonal takes
    /// `values[j]` at `points[j]`. Exact when the points are unisolvent and
    /// the data come from such a form.
    pub fn fit_homogeneous(degree: usize, dim_in: usize, points: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        let tab = table(dim_in, degree);
        let n = tab.len();
        if points.len() < n || points.len() != values.len() {
            return Err(Error::InsufficientSamples(format!(
                "degree-{degree} form in dimension {dim_in} needs {n} points, got {}",
                points.len()
            )));
        }
        let dim_out = values[0].len();
        let a = DMatrix::from_fn(points.len(), n, |j, r| {
            tab.multinom[r] * tab.tuples[r].iter().map(|&i| points[j][i]).product::<f64>()
        });
        let b = DMatrix::from_fn(points.len(), dim_out, |j, o| values[j][o]);
        // Householder QR keeps the fit at round-off level; the lattice is unisolvent
        let qr = a.qr();
        let qtb = qr.q().transpose() * b;
        let sol = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::Input("form fit failed: sample points are not unisolvent".into()))?;
        let mut coeffs = vec![0.0; n * dim_out];
        for o in 0..dim_out {
            for r in 0..n {
                coeffs[o * n + r] = sol[(r, o)];
            }
        }
        Ok(Self { degree, dim_in, dim_out, coeffs })
    }
}

/// Lattice points `α / degree` over all multisets α of size `degree`: a
/// unisolvent set for homogeneous forms of every degree ≤ `degree`.
pub fn lattice_points(dim: usize, degree: usize) -> Vec<Vec<f64>> {
    if degree == 0 {
        return vec![vec![0.0; dim]];
    }
    multisets(dim, degree)
        .into_iter()
        .map(|t| {
            let mut x = vec![0.0; dim];
            for i in t {
                x[i] += 1.0 / degree as f64;
            }
            x
        })
        .collect()
}

fn for_each_tuple<F: FnMut(&[usize])>(dim: usize, degree: usize, mut f: F) {
    let mut idx = vec![0usize; degree];
    if dim == 0 && degree > 0 {
        return;
    }
    loop {
        f(&idx);
        let mut p = 0;
        loop {
            if p == degree {
                return;
            }
            idx[p] += 1;
            if idx[p] < dim {
                break;
            }
            idx[p] = 0;
            p += 1;
        }
    }
}

/// Polynomial jet `J(ξ) = Σ_{k=0}^{n} w_k P_k[ξ^k]` with `w_k = 1/k!`
/// (or `w_k = 1` when the jet stores plain Taylor coefficients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "JetRecord", try_from = "JetRecord")]
pub struct Jet {
    order: usize,
    dim_in: usize,
    dim_out: usize,
    factorial: bool,
    components: Vec<SymMultiForm>,
}

#[derive(Serialize, Deserialize)]
struct ComponentRecord {
    degree: usize,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JetRecord {
    order: usize,
    dim_in: usize,
    dim_out: usize,
    #[serde(default = "default_true")]
    factorial: bool,
    components: Vec<ComponentRecord>,
}

fn default_true() -> bool {
    true
}

impl From<Jet> for JetRecord {
    fn from(j: Jet) -> Self {
        JetRecord {
            order: j.order,
            dim_in: j.dim_in,
            dim_out: j.dim_out,
            factorial: j.factorial,
            components: j
                .components
                .into_iter()
                .map(|c| ComponentRecord { degree: c.degree, coeffs: c.coeffs })
                .collect(),
        }
    }
}

impl TryFrom<JetRecord> for Jet {
    type Error = Error;
    fn try_from(r: JetRecord) -> Result<Self> {
        let comps = r
            .components
            .into_iter()
            .map(|c| SymMultiForm::from_coeffs(c.degree, r.dim_in, r.dim_out, c.coeffs))
            .collect::<Result<Vec<_>>>()?;
        let j = Jet::new(comps, r.factorial)?;
        if j.order != r.order {
            return Err(Error::Input("jet order does not match its components".into()));
        }
        Ok(j)
    }
}

impl Jet {
    /// Components must have degrees `0, 1, …, n` and shared dimensions.
    pub fn new(components: Vec<SymMultiForm>, factorial: bool) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::Input("empty jet".into()))?;
        let (dim_in, dim_out) = (first.dim_in, first.dim_out);
        for (k, c) in components.iter().enumerate() {
            if c.degree != k || c.dim_in != dim_in || c.dim_out != dim_out {
                return Err(Error::Input(format!("jet component {k} has inconsistent shape")));
            }
        }
        Ok(Self { order: components.len() - 1, dim_in, dim_out, factorial, components })
    }

    pub fn zeros(order: usize, dim_in: usize, dim_out: usize) -> Self {
        let components = (0..=order).map(|k| SymMultiForm::zeros(k, dim_in, dim_out)).collect();
        Self { order, dim_in, dim_out, factorial: true, components }
    }

    pub fn order(&self) -> usize {
        self.order
    }
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }
    pub fn dim_out(&self) -> usize {
        self.dim_out
    }
    /// True when components are the raw forms `P_k` and `1/k!` is applied on evaluation.
    pub fn factorial(&self) -> bool {
        self.factorial
    }
    pub fn components(&self) -> &[SymMultiForm] {
        &self.components
    }
    pub fn component(&self, k: usize) -> &SymMultiForm {
        &self.components[k]
    }

    /// Evaluation weight of component `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if self.factorial {
            1.0 / factorial(k)
        } else {
            1.0
        }
    }

    pub fn constant(&self) -> &[f64] {
        &self.components[0].coeffs
    }

    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_dim("jet argument", xi.len(), self.dim_in)?;
        let mut out = vec![0.0; self.dim_out];
        for (k, c) in self.components.iter().enumerate() {
            let v = c.eval(xi)?;
            let w = self.weight(k);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
        Ok(out)
    }

    /// Value and Jacobian (row-major `dim_out × dim_in`) of the polynomial at `ξ`.
    pub fn eval_with_gradient(&self, xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let val = self.eval(xi)?;
        let mut grad = vec![0.0; self.dim_out * self.dim_in];
        for (k, c) in self.components.iter().enumerate().skip(1) {
            let g = c.gradient(xi)?;
            let w = self.weight(k);
            grad.iter_mut().zip(g).for_each(|(o, x)| *o += w * x);
        }
        Ok((val, grad))
    }

    /// Drop components above degree `m`.
    pub fn truncate(&self, m: usize) -> Self {
        let m = m.min(self.order);
        Self {
            order: m,
            dim_in: self.dim_in,
            dim_out: self.dim_out,
            factorial: self.factorial,
            components: self.components[..=m].to_vec(),
        }
    }

    /// The truncated jet `j` (same polynomial without the constant term).
    pub fn without_constant(&self) -> Self {
        let mut j = self.clone();
        j.components[0] = SymMultiForm::zeros(0, self.dim_in, self.dim_out);
        j
    }

    /// Same polynomial stored with the `1/k!` convention.
    pub fn to_factorial(&self) -> Self {
        if self.factorial {
            return self.clone();
        }
        let components = self
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| c.scaled(factorial(k)))
            .collect();
        Self { factorial: true, components, ..self.clone() }
    }

    /// Restrict outputs to rows `range`.
    pub fn select_outputs(&self, rows: std::ops::Range<usize>) -> Self {
        let components: Vec<_> = self.components.iter().map(|c| c.select_outputs(rows.clone())).collect();
        Self { dim_out: rows.len(), components, ..self.clone() }
    }

    /// Largest coefficient magnitude difference to another jet of equal shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if (self.order, self.dim_in, self.dim_out) != (other.order, other.dim_in, other.dim_out) {
            return Err(Error::Input("comparing jets of different shapes".into()));
        }
        let a = self.to_factorial();
        let b = other.to_factorial();
        Ok(a.components
            .iter()
            .zip(&b.components)
            .flat_map(|(x, y)| x.coeffs.iter().zip(&y.coeffs).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max))
    }
}

/// `Σ_k (1/k!) P_k(ξ, …, ξ)`.
pub fn eval_polynomial(jet: &Jet, xi: &[f64]) -> Result<Vec<f64>> {
    jet.eval(xi)
}

/// Symmetric multilinear map of a homogeneous polynomial of degree
/// `degree`, recovered by the signed `2^k`-term polarization sum
/// `M(ξ₁…ξ_k) = (1/(2^k k!)) Σ_ε ε₁⋯ε_k P(Σ ε_j ξ_j)`.
pub fn polarize(p: &dyn Fn(&[f64]) -> Vec<f64>, degree: usize, args: &[&[f64]]) -> Result<Vec<f64>> {
    if args.len() != degree {
        return Err(Error::Input(format!("polarization of degree {degree} given {} arguments", args.len())));
    }
    if degree == 0 {
        return Err(Error::Input("polarization needs at least one argument".into()));
    }
    let dim = args[0].len();
    for a in args {
        check_dim("polarization argument", a.len(), dim)?;
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut x = vec![0.0; dim];
    for mask in 0u64..(1u64 << degree) {
        x.iter_mut().for_each(|v| *v = 0.0);
        let mut sign = 1.0;
        for (j, a) in args.iter().enumerate() {
            let s = if mask >> j & 1 == 1 { -1.0 } else { 1.0 };
            sign *= s;
            x.iter_mut().zip(a.iter()).for_each(|(v, ai)| *v += s * ai);
        }
        let val = p(&x);
        match acc.as_mut() {
            None => acc = Some(val.iter().map(|v| sign * v).collect()),
            Some(a) => a.iter_mut().zip(val).for_each(|(t, v)| *t += sign * v),
        }
    }
    let scale = 1.0 / ((1u64 << degree) as f64 * factorial(degree));
    Ok(acc.unwrap().into_iter().map(|v| v * scale).collect())
}

/// Homogeneous components of a polynomial of degree ≤ `n` given only as an
/// evaluator. Along each probe ray the values at `(j/n)ξ`, `j = 0…n`, are
/// combined through the inverse Vandermonde matrix on those nodes; each
/// homogeneous part is then fitted as a symmetric form on lattice points.
pub fn extract_components(p: &dyn Fn(&[f64]) -> Vec<f64>, dim_in: usize, dim_out: usize, n: usize) -> Result<Jet> {
    if n > MAX_EXTRACTION_ORDER {
        return Err(Error::Capability(format!(
            "component extraction supports order ≤ {MAX_EXTRACTION_ORDER}, requested {n}"
        )));
    }
    if n == 0 {
        let c = p(&vec![0.0; dim_in]);
        check_dim("polynomial output", c.len(), dim_out)?;
        return Jet::new(vec![SymMultiForm::constant(dim_in, &c)], true);
    }
    // coefficient matrix a_{kj}: c_k(ξ) = Σ_j a_{kj} P((j/n)ξ)
    let vander = DMatrix::from_fn(n + 1, n + 1, |j, k| (j as f64 / n as f64).powi(k as i32));
    let inv = vander
        .try_inverse()
        .expect("Vandermonde matrix on distinct nodes is invertible");
    let points = lattice_points(dim_in, n);
    let mut per_degree: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(points.len()); n + 1];
    for x in &points {
        let samples: Vec<Vec<f64>> = (0..=n)
            .map(|j| {
                let t = j as f64 / n as f64;
                let xi: Vec<f64> = x.iter().map(|v| v * t).collect();
                p(&xi)
            })
            .collect();
        for s in &samples {
            check_dim("polynomial output", s.len(), dim_out)?;
        }
        for (k, slot) in per_degree.iter_mut().enumerate() {
            let mut c = vec![0.0; dim_out];
            for (j, s) in samples.iter().enumerate() {
                c.iter_mut().zip(s).for_each(|(ci, si)| *ci += inv[(k, j)] * si);
            }
            // P_k[ξ^k] = k! c_k(ξ)
            slot.push(c.into_iter().map(|v| v * factorial(k)).collect());
        }
    }
    let mut comps = Vec::with_capacity(n + 1);
    comps.push(SymMultiForm::constant(dim_in, &p(&vec![0.0; dim_in])));
    for (k, vals) in per_degree.iter().enumerate().skip(1) {
        comps.push(SymMultiForm::fit_homogeneous(k, dim_in, &points, vals)?);
    }
    Jet::new(comps, true)
}

/// Mixed-slot evaluator `(ξ, η) ↦ P[{ξ}^j, {η}^{n−j}]`.
#[derive(Debug, Clone, Copy)]
pub struct MixedEvaluator<'a> {
    form: &'a SymMultiForm,
    j: usize,
}

impl MixedEvaluator<'_> {
    pub fn eval(&self, xi: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        let n = self.form.degree;
        let args: Vec<&[f64]> = (0..n).map(|s| if s < self.j { xi } else { eta }).collect();
        self.form.eval_multi(&args)
    }

    /// Binomial weight `C(n, j)` of this term in `P(ξ + η)`.
    pub fn weight(&self) -> f64 {
        binomial(self.form.degree, self.j)
    }
}

/// Term `j` of the Newton binomial expansion
/// `P(ξ+η) = Σ_j C(n,j) P[{ξ}^j, {η}^{n−j}]`.
pub fn binomial_expand(form: &SymMultiForm, j: usize) -> Result<MixedEvaluator<'_>> {
    if j > form.degree {
        return Err(Error::Input(format!("binomial index {j} exceeds degree {}", form.degree)));
    }
    Ok(MixedEvaluator { form, j })
}

/// Dense polynomials in `dim` variables truncated at total degree `deg`,
/// indexed by multisets of every degree ≤ `deg`.
struct PolyBasis {
    dim: usize,
    deg: usize,
    tuples: Vec<Vec<usize>>,
    /// `prod[a][b]`: index of the product monomial, when within the degree bound.
    prod: Vec<Vec<Option<usize>>>,
}

impl PolyBasis {
    fn new(dim: usize, deg: usize) -> Self {
        let mut tuples = Vec::new();
        for k in 0..=deg {
            tuples.extend(multisets(dim, k));
        }
        let index: HashMap<Vec<usize>, usize> = tuples.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let prod = tuples
            .iter()
            .map(|a| {
                tuples
                    .iter()
                    .map(|b| {
                        if a.len() + b.len() > deg {
                            return None;
                        }
                        let mut m: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
                        m.sort_unstable();
                        Some(index[&m])
                    })
                    .collect()
            })
            .collect();
        Self { dim, deg, tuples, prod }
    }

    fn len(&self) -> usize {
        self.tuples.len()
    }

    fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, ai) in a.iter().enumerate() {
            if *ai == 0.0 {
                continue;
            }
            for (j, bj) in b.iter().enumerate() {
                if *bj == 0.0 {
                    continue;
                }
                if let Some(k) = self.prod[i][j] {
                    out[k] += ai * bj;
                }
            }
        }
        out
    }

    fn one(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        v[0] = 1.0;
        v
    }

    /// Monomial expansion of each output of a jet (constant term optional).
    fn from_jet(&self, jet: &Jet, with_constant: bool) -> Vec<Vec<f64>> {
        let mut polys = vec![vec![0.0; self.len()]; jet.dim_out];
        let mut offset = 0;
        for k in 0..=self.deg {
            let count = multiset_count(self.dim, k);
            if k <= jet.order && (k > 0 || with_constant) {
                let tab = table(self.dim, k);
                let c = &jet.components[k];
                let w = jet.weight(k);
                for (o, poly) in polys.iter_mut().enumerate() {
                    for r in 0..count {
                        poly[offset + r] = w * tab.multinom[r] * c.coeffs[o * count + r];
                    }
                }
            }
            offset += count;
        }
        polys
    }

    /// Back to a factorial-convention jet of order `deg`.
    fn to_jet(&self, polys: &[Vec<f64>]) -> Result<Jet> {
        let dim_out = polys.len();
        let mut comps = Vec::with_capacity(self.deg + 1);
        let mut offset = 0;
        for k in 0..=self.deg {
            let tab = table(self.dim, k);
            let count = tab.len();
            let mut coeffs = vec![0.0; dim_out * count];
            for (o, poly) in polys.iter().enumerate() {
                for r in 0..count {
                    // degree-k part = (1/k!) P_k[ξ^k] = Σ_α (1/k!)(k!/α!) T_α ξ^α
                    coeffs[o * count + r] = poly[offset + r] * factorial(k) / tab.multinom[r];
                }
            }
            comps.push(SymMultiForm::from_coeffs(k, self.dim, dim_out, coeffs)?);
            offset += count;
        }
        Jet::new(comps, true)
    }
}

/// Substitute the truncated inner jet `j(ξ) = J_inner(ξ) − J_inner(0)` into
/// the outer jet and drop every monomial of total degree above `order`.
pub fn compose_truncate(outer: &Jet, inner: &Jet, order: usize) -> Result<Jet> {
    check_dim("composition slots", inner.dim_out, outer.dim_in)?;
    let basis = PolyBasis::new(inner.dim_in, order);
    let y = basis.from_jet(inner, false);
    let mut result = vec![vec![0.0; basis.len()]; outer.dim_out];
    for (k, form) in outer.components.iter().enumerate() {
        let tab = table(outer.dim_in, k);
        let n = tab.len();
        let w = outer.weight(k);
        for (r, t) in tab.tuples.iter().enumerate() {
            let mut mono = basis.one();
            for &i in t {
                mono = basis.mul(&mono, &y[i]);
            }
            let scale = w * tab.multinom[r];
            for (o, res) in result.iter_mut().enumerate() {
                let c = scale * form.coeffs[o * n + r];
                if c != 0.0 {
                    res.iter_mut().zip(&mono).for_each(|(a, m)| *a += c * m);
                }
            }
        }
    }
    basis.to_jet(&result)
}

/// `P[j₁(ξ), …, j_k(ξ)]` with a separate truncated jet in each slot, keeping
/// total degree ≤ `order`.
pub fn compose_slots(form: &SymMultiForm, inners: &[&Jet], order: usize) -> Result<Jet> {
    if inners.len() != form.degree {
        return Err(Error::Input(format!(
            "form of degree {} given {} slot jets",
            form.degree,
            inners.len()
        )));
    }
    let dim_in = inners.first().map(|j| j.dim_in).unwrap_or(form.dim_in);
    for j in inners {
        check_dim("slot jet output", j.dim_out, form.dim_in)?;
        check_dim("slot jet input", j.dim_in, dim_in)?;
    }
    let basis = PolyBasis::new(dim_in, order);
    let ys: Vec<Vec<Vec<f64>>> = inners.iter().map(|j| basis.from_jet(j, false)).collect();
    let tab = table(form.dim_in, form.degree);
    let n = tab.len();
    let mut result = vec![vec![0.0; basis.len()]; form.dim_out];
    // depth-first over slot indices so that prefix products are shared
    fn rec(
        slot: usize,
        prefix: &[f64],
        idx: &mut Vec<usize>,
        ctx: &(&PolyBasis, &Vec<Vec<Vec<f64>>>, &SymMultiForm, &MultisetTable, usize),
        result: &mut [Vec<f64>],
    ) {
        let (basis, ys, form, tab, n) = *ctx;
        if slot == ys.len() {
            let r = tab.rank_of_unsorted(idx);
            for (o, res) in result.iter_mut().enumerate() {
                let c = form.coeffs[o * n + r];
                if c != 0.0 {
                    res.iter_mut().zip(prefix).for_each(|(a, m)| *a += c * m);
                }
            }
            return;
        }
        for i in 0..tab.dim {
            let next = basis.mul(prefix, &ys[slot][i]);
            if next.iter().all(|v| *v == 0.0) {
                continue;
            }
            idx.push(i);
            rec(slot + 1, &next, idx, ctx, result);
            idx.pop();
        }
    }
    let ctx = (&basis, &ys, form, tab.as_ref(), n);
    rec(0, &basis.one(), &mut Vec::new(), &ctx, &mut result);
    basis.to_jet(&result)
}

/// `‖J_p(ξ + δ) − J_{p₁}(ξ)‖` for jets at `p` and `p₁ = p + δ`.
pub fn compat_residual(jet_at_p1: &Jet, jet_at_p: &Jet, delta: &[f64], xi: &[f64]) -> Result<f64> {
    same_shape(jet_at_p1, jet_at_p)?;
    let shifted: Vec<f64> = xi.iter().zip(delta).map(|(a, b)| a + b).collect();
    let a = jet_at_p.eval(&shifted)?;
    let b = jet_at_p1.eval(xi)?;
    Ok(norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>()))
}

/// Degree-`l` defect `P_l(p+δ)[ξ^l] − Σ_{k≤n−l} (1/k!) P_{l+k}(p)[ξ^l, δ^k]`.
pub fn component_defect(jet_at_p1: &Jet, jet_at_p: &Jet, delta: &[f64], l: usize, xi: &[f64]) -> Result<Vec<f64>> {
    same_shape(jet_at_p1, jet_at_p)?;
    let n = jet_at_p.order;
    if l > n {
        return Err(Error::Input(format!("component index {l} exceeds order {n}")));
    }
    let a = jet_at_p1.to_factorial();
    let b = jet_at_p.to_factorial();
    let mut out = a.components[l].eval(xi)?;
    for k in 0..=(n - l) {
        let form = &b.components[l + k];
        let args: Vec<&[f64]> = (0..l + k).map(|s| if s < l { xi } else { delta }).collect();
        let v = if l + k == 0 { form.coeffs.clone() } else { form.eval_multi(&args)? };
        let w = 1.0 / factorial(k);
        out.iter_mut().zip(v).for_each(|(o, x)| *o -= w * x);
    }
    Ok(out)
}

/// Largest norm of [`component_defect`] over the supplied `ξ` samples.
pub fn compat_residual_components(
    jet_at_p1: &Jet,
    jet_at_p: &Jet,
    delta: &[f64],
    l: usize,
    xi_samples: &[Vec<f64>],
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for xi in xi_samples {
        best = best.max(norm(&component_defect(jet_at_p1, jet_at_p, delta, l, xi)?));
    }
    Ok(best)
}

fn same_shape(a: &Jet, b: &Jet) -> Result<()> {
    if (a.order, a.dim_in, a.dim_out) != (b.order, b.dim_in, b.dim_out) {
        return Err(Error::Input("jets differ in order or dimensions".into()));
    }
    Ok(())
}

/// Outcome of a log-log remainder fit.
#[derive(Debug, Clone, Serialize)]
pub struct TaylorFit {
    /// Fitted exponent; `+∞` when every residual is below `1e-14`.
    pub slope: f64,
    pub degenerate: bool,
    pub radii: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Fit the exponent of `‖F(u+ξ) − J(ξ)‖` against `‖ξ‖`, taking at each
/// radius the worst case over the given unit directions.
pub fn converse_taylor_check(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    u: &[f64],
    jet: &Jet,
    directions: &[Vec<f64>],
    radii: &[f64],
) -> Result<TaylorFit> {
    if radii.len() < 8 {
        return Err(Error::InsufficientSamples(format!("need ≥ 8 radii, got {}", radii.len())));
    }
    let rmin = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let rmax = radii.iter().cloned().fold(0.0, f64::max);
    if !(rmin > 0.0 && rmax / rmin >= 100.0 * (1.0 - 1e-12)) {
        return Err(Error::InsufficientSamples("radii must span at least two decades".into()));
    }
    check_dim("base point", u.len(), jet.dim_in)?;
    let fu = f(u);
    let _ = fu;
    let mut residuals = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst: f64 = 0.0;
        for d in directions {
            let dn = norm(d);
            let xi: Vec<f64> = d.iter().map(|v| v * r / dn).collect();
            let x: Vec<f64> = u.iter().zip(&xi).map(|(a, b)| a + b).collect();
            let fx = f(&x);
            let jx = jet.eval(&xi)?;
            worst = worst.max(norm(&fx.iter().zip(&jx).map(|(a, b)| a - b).collect::<Vec<_>>()));
        }
        residuals.push(worst);
    }
    let keep: Vec<(f64, f64)> = radii
        .iter()
        .zip(&residuals)
        .filter(|(_, e)| **e >= 1e-14)
        .map(|(r, e)| (*r, *e))
        .collect();
    if keep.len() < 2 {
        return Ok(TaylorFit { slope: f64::INFINITY, degenerate: true, radii: radii.to_vec(), residuals });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = keep.into_iter().unzip();
    let (slope, _) = loglog_fit(&xs, &ys).ok_or_else(|| Error::InsufficientSamples("degenerate fit".into()))?;
    Ok(TaylorFit { slope, degenerate: false, radii: radii.to_vec(), residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_jet(coeffs: &[f64]) -> Jet {
        // Taylor coefficients c_k of a 1D polynomial → factorial convention
        let comps = coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| SymMultiForm::from_coeffs(k, 1, 1, vec![c * factorial(k)]).unwrap())
            .collect();
        Jet::new(comps, true).unwrap()
    }

    #[test]
    fn multiset_order_is_graded_lex() {
        assert_eq!(multisets(2, 2), vec![vec![0, 0], vec![0, 1], vec![1, 1]]);
        assert_eq!(multiset_count(3, 4), 15);
        assert_eq!(multisets(3, 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn affine_jet_evaluates() {
        let j = scalar_jet(&[1.0, 2.0, 0.0]);
        assert_eq!(j.eval(&[3.0]).unwrap(), vec![7.0]);
        assert_eq!(j.eval(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let j = Jet::zeros(2, 2, 1);
        assert!(matches!(j.eval(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn polarization_of_product() {
        let p = |x: &[f64]| vec![x[0] * x[1]];
        let v = polarize(&p, 2, &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        let cube = |x: &[f64]| vec![x[0].powi(3)];
        let v = polarize(&cube, 3, &[&[1.0], &[1.0], &[1.0]]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(polarize(&cube, 3, &[&[1.0]]).is_err());
    }

    #[test]
    fn extraction_of_scalar_quadratic() {
        let p = |x: &[f64]| vec![1.0 + 2.0 * x[0] + 3.0 * x[0] * x[0]];
        let j = extract_components(&p, 1, 1, 2).unwrap();
        assert!((j.component(0).coeffs()[0] - 1.0).abs() < 1e-12);
        assert!((j.component(1).coeffs()[0] - 2.0).abs() < 1e-12);
        assert!((j.component(2).coeffs()[0] - 6.0).abs() < 1e-12);
        assert!(matches!(extract_components(&p, 1, 1, 7), Err(Error::Capability(_))));
    }

    #[test]
    fn extraction_of_homogeneous_keeps_single_component() {
        let p = |x: &[f64]| vec![x[0] * x[0] * x[1] - 2.0 * x[1].powi(3)];
        let j = extract_components(&p, 2, 1, 3).unwrap();
        for k in 0..3 {
            assert!(j.component(k).coeffs().iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn binomial_coefficients_of_cube() {
        let f = SymMultiForm::from_coeffs(3, 1, 1, vec![1.0]).unwrap();
        let (xi, eta) = ([2.0], [5.0]);
        let mut total = 0.0;
        for j in 0..=3 {
            let e = binomial_expand(&f, j).unwrap();
            total += e.weight() * e.eval(&xi, &eta).unwrap()[0];
        }
        assert!((total - 343.0).abs() < 1e-12);
        assert_eq!(binomial_expand(&f, 3).unwrap().eval(&xi, &[100.0]).unwrap(), vec![8.0]);
        assert!(binomial_expand(&f, 4).is_err());
    }

    #[test]
    fn identity_substitution_leaves_outer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outer = random_jet(&mut rng, 3, 2, 2);
        let mut id = Jet::zeros(3, 2, 2);
        id.components[1] = SymMultiForm::from_coeffs(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = compose_truncate(&outer, &id, 3).unwrap();
        assert!(c.max_abs_diff(&outer).unwrap() < 1e-13);
    }

    #[test]
    fn quadratic_of_shifted_square_is_truncated() {
        // Q(y) = y² (P₂ = 2), inner j(ξ) = ξ + ξ²: (ξ+ξ²)² = ξ² + 2ξ³ + ξ⁴ → keep ξ²
        let outer = scalar_jet(&[0.0, 0.0, 1.0]);
        let inner = scalar_jet(&[0.0, 1.0, 1.0]);
        let c = compose_truncate(&outer, &inner, 2).unwrap();
        assert!((c.eval(&[0.3]).unwrap()[0] - 0.09).abs() < 1e-15);
        let c3 = compose_truncate(&outer, &inner, 3).unwrap();
        assert!((c3.eval(&[0.3]).unwrap()[0] - (0.09 + 2.0 * 0.027)).abs() < 1e-15);
    }

    #[test]
    fn compat_of_sine_jets() {
        let jet_at = |p: f64| scalar_jet(&[p.sin(), p.cos(), -p.sin() / 2.0]);
        let r = compat_residual(&jet_at(0.1), &jet_at(0.0), &[0.1], &[0.05]).unwrap();
        assert!(r <= 2.0 * 0.15f64.powi(3), "residual {r}");
        let r0 = compat_residual(&jet_at(0.0), &jet_at(0.0), &[0.0], &[0.0]).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn top_component_defect_is_plain_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_jet(&mut rng, 2, 2, 1);
        let b = random_jet(&mut rng, 2, 2, 1);
        let xi = [0.3, -0.7];
        let d = component_defect(&a, &b, &[0.1, 0.2], 2, &xi).unwrap();
        let want = a.component(2).eval(&xi).unwrap()[0] - b.component(2).eval(&xi).unwrap()[0];
        assert!((d[0] - want).abs() < 1e-14);
        assert!(component_defect(&a, &b, &[0.1, 0.2], 3, &xi).is_err());
    }

    #[test]
    fn converse_taylor_exp_and_fractional_power() {
        let radii: Vec<f64> = (0..9).map(|i| 1e-3 * 10f64.powf(i as f64 / 4.0)).collect();
        let ej = scalar_jet(&[1.0, 1.0, 0.5]);
        let fit = converse_taylor_check(&|x: &[f64]| vec![x[0].exp()], &[0.0], &ej, &[vec![1.0]], &radii).unwrap();
        assert!((fit.slope - 3.0).abs() < 0.1, "slope {}", fit.slope);
        let zero = Jet::zeros(2, 1, 1);
        let fit = converse_taylor_check(&|x: &[f64]| vec![x[0].abs().powf(2.5)], &[0.0], &zero, &[vec![1.0]], &radii)
            .unwrap();
        assert!((fit.slope - 2.5).abs() < 1e-9);
        let poly = scalar_jet(&[1.0, -2.0, 4.0]);
        let fit = converse_taylor_check(
            &|x: &[f64]| vec![1.0 - 2.0 * x[0] + 4.0 * x[0] * x[0]],
            &[0.0],
            &poly,
            &[vec![1.0], vec![-1.0]],
            &radii,
        )
        .unwrap();
        assert!(fit.degenerate && fit.slope.is_infinite());
    }

    #[test]
    fn jet_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = random_jet(&mut rng, 2, 3, 2);
        let s = serde_json::to_string(&j).unwrap();
        assert!(s.contains("\"components\""));
        let back: Jet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, j);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = random_jet(&mut rng, 3, 2, 2);
        let x = [0.3, -0.4];
        let (_, g) = j.eval_with_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fp = j.eval(&xp).unwrap();
            let fm = j.eval(&xm).unwrap();
            for o in 0..2 {
                let fd = (fp[o] - fm[o]) / (2.0 * h);
                assert!((fd - g[o * 2 + i]).abs() < 1e-8);
            }
        }
    }

    fn random_jet(rng: &mut ChaCha8Rng, order: usize, dim_in: usize, dim_out: usize) -> Jet {
        let comps = (0..=order)
            .map(|k| {
                let n = multiset_count(dim_in, k) * dim_out;
                SymMultiForm::from_coeffs(k, dim_in, dim_out, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        Jet::new(comps, true).unwrap()
    }
}
