//! Empirical measures of particle snapshots and the weak-topology
//! functionals used to compare them with the limit density.
//!
//! # Test family
//!
//! The weak distance pairs both arguments against a fixed enumeration
//! `φ_1, φ_2, …` of smooth compactly supported functions on ℝ^{2d}. Element
//! `k` is built as follows:
//!
//! 1. `m = k - 1` is split by the inverse Cantor pairing into `(p, q)`.
//! 2. `p` selects a multi-degree `(a_1, …, a_{2d})` in graded
//!    lexicographic order (total degree 0, then 1, …).
//! 3. `q` selects a center `c ∈ ℤ^{2d}`, enumerated by max-norm shells and
//!    lexicographically inside a shell (origin first).
//! 4. `φ_k(z) = Π_i He_{a_i}(z_i - c_i) · b((z_i - c_i)/3) / S_k`, where
//!    `He_a` is the probabilists' Hermite polynomial, `b(u) = exp(1 - 1/(1-u²))`
//!    on `|u| < 1` (zero outside) and `S_k` rescales the sup norm to 1.
//!
//! Coordinates are ordered `(x_1, …, x_d, v_1, …, v_d)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Mollifier;
use crate::particle_sim::{CellGrid, Snapshot, Trajectory};

/// A smooth compactly supported test function φ(t, x, v).
pub trait TestFunction: Sync {
    fn dim(&self) -> usize;

    fn value(&self, t: f64, x: &[f64], v: &[f64]) -> f64;

    fn time_derivative(&self, _t: f64, _x: &[f64], _v: &[f64]) -> f64 {
        0.0
    }

    /// v · ∇_x φ.
    fn transport_term(&self, t: f64, x: &[f64], v: &[f64]) -> f64;

    /// ½ Δ_v φ.
    fn half_laplacian_v(&self, t: f64, x: &[f64], v: &[f64]) -> f64;

    /// |∇_v φ|², the density of the diffusion quadratic variation.
    fn grad_v_sq(&self, t: f64, x: &[f64], v: &[f64]) -> f64;

    /// (∂_t + v·∇_x + ½Δ_v) φ.
    fn generator(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        self.time_derivative(t, x, v) + self.transport_term(t, x, v) + self.half_laplacian_v(t, x, v)
    }

    /// Radius K of a Euclidean ball in ℝ^{2d} containing the support.
    fn support_radius(&self) -> f64;

    fn bounds(&self) -> FunctionBounds;
}

/// Sup-norm bounds of a test function and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionBounds {
    pub sup: f64,
    /// Upper bound on sup |φ| + Σ sup |∂φ|.
    pub c1: f64,
    /// Upper bound on `c1` + Σ sup |∂²φ|.
    pub c2: f64,
}

/// One-dimensional factor `He_a((y - c)/s) · b((y - c)/w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HermiteBump {
    pub degree: u32,
    pub center: f64,
    pub scale: f64,
    pub half_width: f64,
}

fn hermite(n: u32, z: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => z,
        _ => {
            let (mut prev, mut cur) = (1.0, z);
            for k in 1..n {
                let next = z * cur - k as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

impl HermiteBump {
    pub fn new(degree: u32, center: f64) -> Self {
        Self {
            degree,
            center,
            scale: 1.0,
            half_width: 3.0,
        }
    }

    /// (ψ, ψ', ψ'') at y.
    pub fn eval3(&self, y: f64) -> (f64, f64, f64) {
        let u = (y - self.center) / self.half_width;
        if u.abs() >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let z = (y - self.center) / self.scale;
        let a = self.degree;
        let h = hermite(a, z);
        let h1 = if a >= 1 { a as f64 * hermite(a - 1, z) } else { 0.0 };
        let h2 = if a >= 2 {
            (a * (a - 1)) as f64 * hermite(a - 2, z)
        } else {
            0.0
        };
        let q = 1.0 - u * u;
        let b = (1.0 - 1.0 / q).exp();
        let g1 = -2.0 * u / (q * q);
        let g2 = -2.0 / (q * q) - 8.0 * u * u / (q * q * q);
        let b1 = b * g1;
        let b2 = b * (g2 + g1 * g1);
        let (s, w) = (self.scale, self.half_width);
        let v0 = h * b;
        let v1 = h1 / s * b + h * b1 / w;
        let v2 = h2 / (s * s) * b + 2.0 * h1 / s * b1 / w + h * b2 / (w * w);
        (v0, v1, v2)
    }

    pub fn value(&self, y: f64) -> f64 {
        self.eval3(y).0
    }

    /// Grid estimates of (sup|ψ|, sup|ψ'|, sup|ψ''|).
    pub fn sup_norms(&self) -> (f64, f64, f64) {
        let n = 4000;
        let mut m = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..=n {
            let y = self.center - self.half_width + 2.0 * self.half_width * k as f64 / n as f64;
            let (a, b, c) = self.eval3(y);
            m = (m.0.max(a.abs()), m.1.max(b.abs()), m.2.max(c.abs()));
        }
        m
    }
}

/// Tensor product Π_i ψ_i(z_i) over the 2d phase coordinates, times `amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFunction {
    dim: usize,
    factors: Vec<HermiteBump>,
    amplitude: f64,
}

impl TensorFunction {
    pub fn new(dim: usize, factors: Vec<HermiteBump>, amplitude: f64) -> Result<Self> {
        if factors.len() != 2 * dim {
            return Err(invalid("factors", format!("need {} factors, got {}", 2 * dim, factors.len())));
        }
        Ok(Self {
            dim,
            factors,
            amplitude,
        })
    }

    /// Rescale so that the grid sup norm is `target`.
    pub fn normalized(mut self, target: f64) -> Self {
        let sup: f64 = self.factors.iter().map(|f| f.sup_norms().0).product();
        self.amplitude = target / sup;
        self
    }

    pub fn factors(&self) -> &[HermiteBump] {
        &self.factors
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    #[inline]
    fn coords<'a>(&'a self, x: &'a [f64], v: &'a [f64]) -> impl Iterator<Item = (&'a HermiteBump, f64)> + 'a {
        self.factors.iter().zip(x.iter().chain(v.iter()).copied())
    }

    fn eval_all(&self, x: &[f64], v: &[f64], out: &mut [(f64, f64, f64); 6]) -> bool {
        for (k, (f, y)) in self.coords(x, v).enumerate() {
            out[k] = f.eval3(y);
            if out[k].0 == 0.0 && out[k].1 == 0.0 {
                return false;
            }
        }
        true
    }
}

impl TestFunction for TensorFunction {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        let mut acc = self.amplitude;
        for (f, y) in self.coords(x, v) {
            acc *= f.value(y);
            if acc == 0.0 {
                return 0.0;
            }
        }
        acc
    }

    fn transport_term(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut e = [(0.0, 0.0, 0.0); 6];
        if !self.eval_all(x, v, &mut e) {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..d {
            let mut term = self.amplitude * v[a] * e[a].1;
            for (k, ek) in e.iter().enumerate().take(2 * d) {
                if k != a {
                    term *= ek.0;
                }
            }
            total += term;
        }
        total
    }

    fn half_laplacian_v(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut e = [(0.0, 0.0, 0.0); 6];
        if !self.eval_all(x, v, &mut e) {
            return 0.0;
        }
        let mut total = 0.0;
        for a in d..2 * d {
            let mut term = self.amplitude * e[a].2;
            for (k, ek) in e.iter().enumerate().take(2 * d) {
                if k != a {
                    term *= ek.0;
                }
            }
            total += term;
        }
        0.5 * total
    }

    fn grad_v_sq(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut e = [(0.0, 0.0, 0.0); 6];
        if !self.eval_all(x, v, &mut e) {
            return 0.0;
        }
        let mut total = 0.0;
        for a in d..2 * d {
            let mut term = self.amplitude * e[a].1;
            for (k, ek) in e.iter().enumerate().take(2 * d) {
                if k != a {
                    term *= ek.0;
                }
            }
            total += term * term;
        }
        total
    }

    fn support_radius(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let r = f.center.abs() + f.half_width;
                r * r
            })
            .sum::<f64>()
            .sqrt()
    }

    fn bounds(&self) -> FunctionBounds {
        let norms: Vec<_> = self.factors.iter().map(HermiteBump::sup_norms).collect();
        let sup0: f64 = norms.iter().map(|n| n.0).product();
        let mut c1 = sup0;
        let mut c2 = 0.0;
        for (k, n) in norms.iter().enumerate() {
            let rest: f64 = norms.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, m)| m.0).product();
            c1 += n.1 * rest;
            c2 += n.2 * rest;
            for (j, m) in norms.iter().enumerate().filter(|(j, _)| *j > k) {
                let others: f64 = norms
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k && *i != j)
                    .map(|(_, o)| o.0)
                    .product();
                c2 += 2.0 * n.1 * m.1 * others;
            }
        }
        let a = self.amplitude.abs();
        FunctionBounds {
            sup: a * sup0,
            c1: a * c1,
            c2: a * (c1 + c2),
        }
    }
}

/// φ ≡ c on a ball of radius `radius`; only meaningful for pairing with
/// measures supported inside the ball, where all derivatives vanish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantFunction {
    pub dim: usize,
    pub value: f64,
    pub radius: f64,
}

impl TestFunction for ConstantFunction {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        let r2: f64 = x.iter().chain(v).map(|c| c * c).sum();
        if r2 <= self.radius * self.radius {
            self.value
        } else {
            0.0
        }
    }
    fn transport_term(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn half_laplacian_v(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn grad_v_sq(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn support_radius(&self) -> f64 {
        self.radius
    }
    fn bounds(&self) -> FunctionBounds {
        let a = self.value.abs();
        FunctionBounds { sup: a, c1: a, c2: a }
    }
}

/// φ(t, x, v) = g(t) · ψ(x, v) with g(t) = a + b t.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInTime<F> {
    pub inner: F,
    pub intercept: f64,
    pub slope: f64,
}

impl<F: TestFunction> TestFunction for LinearInTime<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        (self.intercept + self.slope * t) * self.inner.value(t, x, v)
    }
    fn time_derivative(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        self.slope * self.inner.value(t, x, v)
    }
    fn transport_term(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        (self.intercept + self.slope * t) * self.inner.transport_term(t, x, v)
    }
    fn half_laplacian_v(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        (self.intercept + self.slope * t) * self.inner.half_laplacian_v(t, x, v)
    }
    fn grad_v_sq(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let g = self.intercept + self.slope * t;
        g * g * self.inner.grad_v_sq(t, x, v)
    }
    fn support_radius(&self) -> f64 {
        self.inner.support_radius()
    }
    fn bounds(&self) -> FunctionBounds {
        // sup over t ∈ [0, 1]
        let g = self.intercept.abs().max((self.intercept + self.slope).abs());
        let b = self.inner.bounds();
        FunctionBounds {
            sup: g * b.sup,
            c1: g * b.c1 + self.slope.abs() * b.sup,
            c2: g * b.c2 + self.slope.abs() * b.c1,
        }
    }
}

fn cantor_unpair(m: usize) -> (usize, usize) {
    let w = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0).floor() as usize;
    // guard against rounding at perfect squares
    let w = if (w + 1) * (w + 2) / 2 <= m { w + 1 } else { w };
    let t = w * (w + 1) / 2;
    let q = m - t;
    (w - q, q)
}

fn graded_multi_index(dims: usize, mut p: usize) -> Vec<u32> {
    let mut total = 0u32;
    loop {
        let block = compositions(dims, total);
        if p < block.len() {
            return block[p].clone();
        }
        p -= block.len();
        total += 1;
    }
}

/// All `dims`-tuples of nonnegative integers summing to `total`, lexicographically descending.
fn compositions(dims: usize, total: u32) -> Vec<Vec<u32>> {
    if dims == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(dims - 1, total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn shell_center(dims: usize, mut q: usize) -> Vec<i64> {
    let mut shell: i64 = 0;
    loop {
        let side = 2 * shell + 1;
        let mut members = Vec::new();
        let count = (side as usize).pow(dims as u32);
        for idx in 0..count {
            let mut rem = idx;
            let mut c = vec![0i64; dims];
            for slot in c.iter_mut().rev() {
                *slot = (rem % side as usize) as i64 - shell;
                rem /= side as usize;
            }
            if c.iter().map(|z| z.abs()).max().unwrap_or(0) == shell {
                members.push(c);
            }
        }
        if q < members.len() {
            return members.swap_remove(q);
        }
        q -= members.len();
        shell += 1;
    }
}

/// The fixed enumeration of test functions for the weak distance.
#[derive(Debug, Clone)]
pub struct TestFamily {
    dim: usize,
    elements: Vec<TensorFunction>,
}

/// Default truncation of the weak distance.
pub const DEFAULT_K_MAX: usize = 24;

impl TestFamily {
    /// First `k_max` elements for phase dimension 2·`dim`.
    pub fn new(dim: usize, k_max: usize) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(invalid("dim", "test family supports 1 ≤ d ≤ 3"));
        }
        let elements = (1..=k_max)
            .map(|k| Self::element(dim, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, elements })
    }

    /// Element `k ≥ 1` of the enumeration.
    pub fn element(dim: usize, k: usize) -> Result<TensorFunction> {
        if k == 0 {
            return Err(invalid("k", "family is indexed from 1"));
        }
        let dims = 2 * dim;
        let (p, q) = cantor_unpair(k - 1);
        let degrees = graded_multi_index(dims, p);
        let center = shell_center(dims, q);
        let factors = degrees
            .iter()
            .zip(&center)
            .map(|(&a, &c)| HermiteBump::new(a, c as f64))
            .collect();
        Ok(TensorFunction::new(dim, factors, 1.0)?.normalized(1.0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<&TensorFunction> {
        self.elements.get(k.checked_sub(1)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TensorFunction> {
        self.elements.iter()
    }
}

/// Anything that can be integrated against a test function.
pub trait Pairable {
    fn pair_with(&self, phi: &dyn TestFunction, t: f64) -> f64;
}

/// (1/N) Σ_{alive} δ_{(x_i, v_i)}.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    pub n0: usize,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn from_snapshot(dim: usize, n0: usize, snap: &Snapshot) -> Self {
        Self {
            dim,
            n0,
            x: snap.x.clone(),
            v: snap.v.clone(),
        }
    }

    pub fn at(traj: &Trajectory, index: usize) -> Self {
        Self::from_snapshot(traj.dim, traj.n0, &traj.snapshots[index])
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// N(t)/N.
    pub fn mass(&self) -> f64 {
        self.len() as f64 / self.n0 as f64
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.n0 as f64
    }

    pub fn point(&self, i: usize) -> (&[f64], &[f64]) {
        let d = self.dim;
        (&self.x[i * d..(i + 1) * d], &self.v[i * d..(i + 1) * d])
    }

    pub fn points(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.x.chunks(self.dim).zip(self.v.chunks(self.dim))
    }
}

impl Pairable for EmpiricalMeasure {
    fn pair_with(&self, phi: &dyn TestFunction, t: f64) -> f64 {
        pair(self, phi, t)
    }
}

/// ⟨φ_t, μ⟩ = (1/N) Σ_{alive} φ(t, x_i, v_i).
pub fn pair(mu: &EmpiricalMeasure, phi: &dyn TestFunction, t: f64) -> f64 {
    mu.points().map(|(x, v)| phi.value(t, x, v)).sum::<f64>() / mu.n0 as f64
}

/// Σ_{k ≤ k_max} 2^{-k} (|⟨μ,φ_k⟩ - ⟨ν,φ_k⟩| ∧ 1) over `family`.
pub fn weak_distance(
    mu: &dyn Pairable,
    nu: &dyn Pairable,
    family: &TestFamily,
    k_max: usize,
    t: f64,
) -> Result<f64> {
    Ok(pairing_gaps(mu, nu, family, k_max, t)?
        .iter()
        .enumerate()
        .map(|(k, gap)| gap.min(1.0) * 0.5f64.powi(k as i32 + 1))
        .sum())
}

/// |⟨μ,φ_k⟩ - ⟨ν,φ_k⟩| for k = 1..=k_max.
pub fn pairing_gaps(
    mu: &dyn Pairable,
    nu: &dyn Pairable,
    family: &TestFamily,
    k_max: usize,
    t: f64,
) -> Result<Vec<f64>> {
    if k_max < 1 {
        return Err(invalid("k_max", "must be at least 1"));
    }
    if k_max > family.len() {
        return Err(invalid(
            "k_max",
            format!("family holds {} elements, {k_max} requested", family.len()),
        ));
    }
    Ok(family
        .iter()
        .take(k_max)
        .map(|phi| (mu.pair_with(phi, t) - nu.pair_with(phi, t)).abs())
        .collect())
}

/// ∫dw ⟨η^δ(w-x₁) η^δ(w-x₂) φ(t,w,v₁), μ(dx₁,dv₁) μ(dx₂,dv₂)⟩, diagonal
/// pairs included. The w-integral is a midpoint rule with spacing δ/8 on
/// the overlap of the two η^δ supports.
pub fn mollified_nonlinearity(
    mu: &EmpiricalMeasure,
    phi: &dyn TestFunction,
    eta: &Mollifier,
    delta: f64,
    t: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(invalid("delta", format!("must lie in (0, 1], got {delta}")));
    }
    let d = mu.dim;
    if eta.dim() != d {
        return Err(invalid("eta", "dimension mismatch"));
    }
    let n = mu.len();
    if n == 0 {
        return Ok(0.0);
    }
    let alive = vec![true; n];
    let grid = CellGrid::build(d, 2.0 * delta, &mu.x, &alive);
    let mut total = 0.0;
    for i in 0..n {
        let (xi, vi) = mu.point(i);
        total += overlap_integral(eta, delta, xi, xi, |w| phi.value(t, w, vi));
    }
    for (i, j, _) in grid.pairs_within(&mu.x, 2.0 * delta) {
        let (xi, vi) = mu.point(i);
        let (xj, vj) = mu.point(j);
        total += overlap_integral(eta, delta, xi, xj, |w| phi.value(t, w, vi) + phi.value(t, w, vj));
    }
    let w = mu.weight();
    Ok(total * w * w)
}

fn overlap_integral<F: FnMut(&[f64]) -> f64>(eta: &Mollifier, delta: f64, a: &[f64], b: &[f64], mut g: F) -> f64 {
    let d = a.len();
    let h = delta / 8.0;
    let mut lo = vec![0.0; d];
    let mut counts = vec![0usize; d];
    for k in 0..d {
        let l = a[k].max(b[k]) - delta;
        let u = a[k].min(b[k]) + delta;
        if u <= l {
            return 0.0;
        }
        lo[k] = l;
        counts[k] = ((u - l) / h).ceil() as usize;
    }
    let total_cells: usize = counts.iter().product();
    let mut w = vec![0.0; d];
    let mut za = vec![0.0; d];
    let mut zb = vec![0.0; d];
    let mut acc = 0.0;
    for cell in 0..total_cells {
        let mut rem = cell;
        let mut vol = 1.0;
        for k in 0..d {
            let idx = rem % counts[k];
            rem /= counts[k];
            let l = lo[k];
            let u = a[k].min(b[k]) + delta;
            let hk = (u - l) / counts[k] as f64;
            w[k] = l + (idx as f64 + 0.5) * hk;
            vol *= hk;
            za[k] = w[k] - a[k];
            zb[k] = w[k] - b[k];
        }
        let ea = eta.scaled_sq(delta, za.iter().map(|c| c * c).sum());
        if ea == 0.0 {
            continue;
        }
        let eb = eta.scaled_sq(delta, zb.iter().map(|c| c * c).sum());
        if eb == 0.0 {
            continue;
        }
        acc += ea * eb * g(&w) * vol;
    }
    acc
}

/// (1/N²) Σ_{i≠j} θ^ε(x_i - x_j) φ(t,x_i,v_i) · ω(x_j, v_j) at one snapshot.
pub fn interaction_density<W: Fn(&[f64], &[f64]) -> f64>(
    snap: &Snapshot,
    dim: usize,
    n0: usize,
    eps: f64,
    theta: &Mollifier,
    phi: &dyn TestFunction,
    partner_weight: W,
) -> f64 {
    let n = snap.len();
    if n < 2 {
        return 0.0;
    }
    let alive = vec![true; n];
    let grid = CellGrid::build(dim, eps, &snap.x, &alive);
    let d = dim;
    let mut acc = 0.0;
    for (i, j, r2) in grid.pairs_within(&snap.x, eps) {
        let th = theta.scaled_sq(eps, r2);
        if th == 0.0 {
            continue;
        }
        let (xi, vi) = (&snap.x[i * d..(i + 1) * d], &snap.v[i * d..(i + 1) * d]);
        let (xj, vj) = (&snap.x[j * d..(j + 1) * d], &snap.v[j * d..(j + 1) * d]);
        acc += th * (phi.value(snap.t, xi, vi) * partner_weight(xj, vj) + phi.value(snap.t, xj, vj) * partner_weight(xi, vi));
    }
    let w = 1.0 / n0 as f64;
    acc * w * w
}

/// Trapezoid-rule time integral of the interaction density over the
/// trajectory's snapshots. Zero when the run had no interaction.
pub fn interaction_functional(traj: &Trajectory, phi: &dyn TestFunction) -> f64 {
    interaction_functional_weighted(traj, phi, |_, _| 1.0)
}

/// As [`interaction_functional`] with the partner weighted by `ω(x_j, v_j)`.
pub fn interaction_functional_weighted<W: Fn(&[f64], &[f64]) -> f64 + Copy>(
    traj: &Trajectory,
    phi: &dyn TestFunction,
    partner_weight: W,
) -> f64 {
    let Some(theta) = &traj.theta else { return 0.0 };
    let snaps = &traj.snapshots;
    if snaps.len() < 2 {
        return 0.0;
    }
    if snaps
        .windows(2)
        .any(|w| w[1].t - w[0].t > traj.dt * (1.0 + 1e-9))
    {
        log::warn!("snapshot spacing exceeds the step size; interaction quadrature is coarse");
    }
    let values: Vec<f64> = snaps
        .iter()
        .map(|s| interaction_density(s, traj.dim, traj.n0, traj.eps, theta, phi, partner_weight))
        .collect();
    snaps
        .windows(2)
        .zip(values.windows(2))
        .map(|(s, g)| 0.5 * (s[1].t - s[0].t) * (g[0] + g[1]))
        .sum()
}

/// Smooth radial cutoff: 1 on |y| ≤ Λ, 0 on |y| ≥ 2Λ.
pub fn radial_cutoff(y: &[f64], lambda: f64) -> f64 {
    let r = y.iter().map(|c| c * c).sum::<f64>().sqrt() / lambda;
    let h = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let a = h(2.0 - r);
    let b = h(r - 1.0);
    a / (a + b)
}

/// ψ^Λ(x, v) = ψ_1^Λ(x) ψ_2^Λ(v).
pub fn velocity_cutoff(lambda: f64) -> impl Fn(&[f64], &[f64]) -> f64 + Copy {
    move |x, v| radial_cutoff(x, lambda) * radial_cutoff(v, lambda)
}

/// One evaluated functional: `(N, seed, t, name, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalRow {
    pub n: usize,
    pub seed: u64,
    pub t: f64,
    pub name: String,
    pub value: f64,
}

/// Functional rows prefixed by the config hash.
pub fn write_functional_csv<W: std::io::Write>(w: W, config_hash: &str, rows: &[FunctionalRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["config_hash", "n", "seed", "t", "name", "value"])?;
    for r in rows {
        wtr.write_record([
            config_hash.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.t.to_string(),
            r.name.clone(),
            r.value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Inverse of [`write_functional_csv`]; returns the hash column and the rows.
pub fn read_functional_csv<R: std::io::Read>(r: R) -> Result<(String, Vec<FunctionalRow>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut hash = String::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or_default();
        let bad = |what: &str| invalid("csv", format!("unparsable {what} in record {:?}", rec.position().map(|p| p.line())));
        if hash.is_empty() {
            hash = field(0).to_string();
        }
        rows.push(FunctionalRow {
            n: field(1).parse().map_err(|_| bad("n"))?,
            seed: field(2).parse().map_err(|_| bad("seed"))?,
            t: field(3).parse().map_err(|_| bad("t"))?,
            name: field(4).to_string(),
            value: field(5).parse().map_err(|_| bad("value"))?,
        });
    }
    Ok((hash, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cantor_roundtrip() {
        for m in 0..500 {
            let (p, q) = cantor_unpair(m);
            let w = p + q;
            assert_eq!(w * (w + 1) / 2 + q, m);
        }
    }

    #[test]
    fn first_family_elements() {
        let f = TestFamily::element(1, 1).unwrap();
        assert!(f.factors().iter().all(|b| b.degree == 0 && b.center == 0.0));
        let f2 = TestFamily::element(1, 2).unwrap();
        assert_eq!(f2.factors()[0].degree, 1);
        let f3 = TestFamily::element(1, 3).unwrap();
        assert!(f3.factors().iter().all(|b| b.degree == 0));
        assert!(f3.factors().iter().any(|b| b.center != 0.0));
        assert!(TestFamily::element(1, 0).is_err());
    }

    #[test]
    fn family_elements_are_distinct_and_normalized() {
        let fam = TestFamily::new(1, 24).unwrap();
        for (a, fa) in fam.iter().enumerate() {
            let b = fa.bounds();
            assert!((b.sup - 1.0).abs() < 1e-9);
            for fb in fam.iter().skip(a + 1) {
                assert_ne!(fa, fb);
            }
        }
    }

    #[test]
    fn hermite_bump_derivatives_match_finite_differences() {
        for degree in 0..4 {
            let f = HermiteBump::new(degree, 0.4);
            for k in 0..40 {
                let y = -2.3 + 0.12 * k as f64;
                let h = 1e-5;
                let (_, d1, d2) = f.eval3(y);
                let fd1 = (f.value(y + h) - f.value(y - h)) / (2.0 * h);
                let fd2 = (f.value(y + h) - 2.0 * f.value(y) + f.value(y - h)) / (h * h);
                assert!((d1 - fd1).abs() < 1e-6 * (1.0 + d1.abs()), "{degree} {y} {d1} {fd1}");
                assert!((d2 - fd2).abs() < 1e-3 * (1.0 + d2.abs()), "{degree} {y} {d2} {fd2}");
            }
        }
    }

    #[test]
    fn generator_terms_match_finite_differences() {
        let phi = TestFamily::element(1, 5).unwrap();
        let h = 1e-4;
        for &(x, v) in &[(0.3, -0.7), (-1.1, 0.4), (0.0, 1.9)] {
            let dx = (phi.value(0.0, &[x + h], &[v]) - phi.value(0.0, &[x - h], &[v])) / (2.0 * h);
            let dvv = (phi.value(0.0, &[x], &[v + h]) - 2.0 * phi.value(0.0, &[x], &[v]) + phi.value(0.0, &[x], &[v - h])) / (h * h);
            let dv = (phi.value(0.0, &[x], &[v + h]) - phi.value(0.0, &[x], &[v - h])) / (2.0 * h);
            assert!((phi.transport_term(0.0, &[x], &[v]) - v * dx).abs() < 1e-6);
            assert!((phi.half_laplacian_v(0.0, &[x], &[v]) - 0.5 * dvv).abs() < 1e-4);
            assert!((phi.grad_v_sq(0.0, &[x], &[v]) - dv * dv).abs() < 1e-6);
        }
    }

    #[test]
    fn pair_examples() {
        let mu = EmpiricalMeasure {
            dim: 1,
            n0: 4,
            x: vec![0.3],
            v: vec![-0.2],
        };
        let phi = TestFamily::element(1, 2).unwrap();
        assert_eq!(pair(&mu, &phi, 0.0), phi.value(0.0, &[0.3], &[-0.2]) / 4.0);
        let one = ConstantFunction {
            dim: 1,
            value: 1.0,
            radius: 10.0,
        };
        assert_eq!(pair(&mu, &one, 0.0), 0.25);
        let empty = EmpiricalMeasure {
            dim: 1,
            n0: 4,
            x: vec![],
            v: vec![],
        };
        assert_eq!(pair(&empty, &phi, 0.0), 0.0);
    }

    #[test]
    fn weak_distance_rejects_zero_kmax() {
        let fam = TestFamily::new(1, 4).unwrap();
        let mu = EmpiricalMeasure {
            dim: 1,
            n0: 1,
            x: vec![0.0],
            v: vec![0.0],
        };
        assert!(weak_distance(&mu, &mu, &fam, 0, 0.0).is_err());
        assert_eq!(weak_distance(&mu, &mu, &fam, 4, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(radial_cutoff(&[0.5], 1.0), 1.0);
        assert_eq!(radial_cutoff(&[2.5], 1.0), 0.0);
        let mid = radial_cutoff(&[1.5], 1.0);
        assert!(mid > 0.0 && mid < 1.0);
    }
}
