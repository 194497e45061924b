//! Kolmogorov transition kernels, the free one-particle density, the
//! hypoelliptic Green's function and the volume function Λ.
//!
//! Both transition kernels are instances of one Gaussian density: the law
//! at time `t` of `dx = v dt`, `dv = √(2κ) dB` started from `(x₀, v₀)`,
//!
//! ```text
//! (√3 / (2π κ t²))^d exp{-(1/κ) [3 |b/(2√t) + c/t^{3/2}|² + |b|²/(4t)]}
//! ```
//!
//! with `b = v - v₀` and `c = x - x₀ - t v` (endpoint velocity). `κ = 1`
//! is the operator `v·∇_x + Δ_v`, `κ = ½` the particle generator
//! `v·∇_x + ½Δ_v`.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{invalid, Error, Result};
use crate::model::{unit_ball_volume, InitialDensity, InitialShape};
use crate::quadrature::{integrate, integrate_with_breaks, QuadResult, QuadSettings};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Diffusion coefficient of `v·∇_x + Δ_v`.
pub const KAPPA_GREEN: f64 = 1.0;
/// Diffusion coefficient of the particle generator `v·∇_x + ½Δ_v`.
pub const KAPPA_PARTICLE: f64 = 0.5;

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid("t", format!("must be positive and finite, got {t}")))
    }
}

fn check_dims(from_x: &[f64], from_v: &[f64], to_x: &[f64], to_v: &[f64]) -> Result<()> {
    let d = from_x.len();
    if d == 0 || from_v.len() != d || to_x.len() != d || to_v.len() != d {
        return Err(invalid("point", "phase points must share a positive dimension"));
    }
    Ok(())
}

/// Transition density from `(from_x, from_v)` to `(to_x, to_v)` over time
/// `t` for the generator `v·∇_x + κΔ_v`.
pub fn kolmogorov_density(kappa: f64, t: f64, from_x: &[f64], from_v: &[f64], to_x: &[f64], to_v: &[f64]) -> Result<f64> {
    check_time(t)?;
    if !(kappa > 0.0) {
        return Err(invalid("kappa", "must be positive"));
    }
    check_dims(from_x, from_v, to_x, to_v)?;
    Ok(density_unchecked(kappa, t, from_x, from_v, to_x, to_v))
}

#[inline]
fn density_unchecked(kappa: f64, t: f64, from_x: &[f64], from_v: &[f64], to_x: &[f64], to_v: &[f64]) -> f64 {
    let d = from_x.len();
    let st = t.sqrt();
    let t32 = t * st;
    let mut q = 0.0;
    for k in 0..d {
        let b = to_v[k] - from_v[k];
        let c = (to_x[k] - from_x[k]) - t * to_v[k];
        let m = b / (2.0 * st) + c / t32;
        q += 3.0 * m * m + b * b / (4.0 * t);
    }
    let pref = SQRT3 / (2.0 * std::f64::consts::PI * kappa * t * t);
    pref.powi(d as i32) * (-q / kappa).exp()
}

/// 𝖯_t((x,v),(y,w)): density of reaching `(x, v)` from `(y, w)` under
/// `v·∇_x + Δ_v`.
pub fn kolmogorov_kernel(t: f64, x: &[f64], v: &[f64], y: &[f64], w: &[f64]) -> Result<f64> {
    kolmogorov_density(KAPPA_GREEN, t, y, w, x, v)
}

/// 𝖯*_t((x₀,v₀),(x,v)): one-particle transition density under `v·∇_x + ½Δ_v`.
pub fn one_particle_kernel(t: f64, x0: &[f64], v0: &[f64], x: &[f64], v: &[f64]) -> Result<f64> {
    kolmogorov_density(KAPPA_PARTICLE, t, x0, v0, x, v)
}

/// Λ((x,v), δ) = Σ|v_i| δ^{4d-1} + δ^{4d}.
pub fn volume_lambda(v: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(invalid("delta", format!("must be positive, got {delta}")));
    }
    let d = v.len() as i32;
    let s: f64 = v.iter().map(|c| c.abs()).sum();
    Ok(s * delta.powi(4 * d - 1) + delta.powi(4 * d))
}

/// Integrate over a region described coordinate by coordinate: `bounds(k,
/// prefix)` gives the range and interior breakpoints of coordinate `k`
/// given the earlier ones.
pub fn nested_integral<B, F>(n: usize, bounds: &B, f: &F, settings: &[QuadSettings]) -> QuadResult
where
    B: Fn(usize, &[f64]) -> (f64, f64, Vec<f64>),
    F: Fn(&[f64]) -> f64,
{
    nested_level(n, Vec::with_capacity(n), bounds, f, settings)
}

fn nested_level<B, F>(n: usize, prefix: Vec<f64>, bounds: &B, f: &F, settings: &[QuadSettings]) -> QuadResult
where
    B: Fn(usize, &[f64]) -> (f64, f64, Vec<f64>),
    F: Fn(&[f64]) -> f64,
{
    let k = prefix.len();
    let (a, b, breaks) = bounds(k, &prefix);
    let s = settings[k.min(settings.len() - 1)];
    let mut inner_ok = true;
    let mut inner_err: f64 = 0.0;
    let mut evals = 0;
    let r = integrate_with_breaks(
        |z| {
            let mut p = prefix.clone();
            p.push(z);
            if k + 1 == n {
                f(&p)
            } else {
                let r = nested_level(n, p, bounds, f, settings);
                inner_ok &= r.converged;
                inner_err = inner_err.max(r.error);
                evals += r.evaluations;
                r.value
            }
        },
        a,
        b,
        &breaks,
        &s,
    );
    QuadResult {
        value: r.value,
        error: r.error + inner_err * (b - a),
        evaluations: r.evaluations + evals,
        converged: r.converged && inner_ok,
    }
}

/// Adaptive quadrature on a ball of radius `radius` in ℝ^n.
pub fn ball_integral<F, P>(n: usize, radius: f64, breaks: &P, f: &F, settings: &[QuadSettings]) -> QuadResult
where
    F: Fn(&[f64]) -> f64,
    P: Fn(usize, &[f64]) -> Vec<f64>,
{
    let bounds = |k: usize, prefix: &[f64]| {
        let used: f64 = prefix.iter().map(|c| c * c).sum();
        let h = (radius * radius - used).max(0.0).sqrt();
        (-h, h, breaks(k, prefix))
    };
    nested_integral(n, &bounds, f, settings)
}

#[inline]
fn std_normal_cdf_diff(hi: f64, lo: f64) -> f64 {
    // Φ(hi) - Φ(lo), evaluated on the tail side that avoids cancellation
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if lo >= 0.0 {
        0.5 * (erfc(lo * s) - erfc(hi * s))
    } else if hi <= 0.0 {
        0.5 * (erfc(-hi * s) - erfc(-lo * s))
    } else {
        1.0 - 0.5 * (erfc(hi * s) + erfc(-lo * s))
    }
}

/// Pointwise upper envelope for the free density with explicit constants.
///
/// With `A = Γ (√3/π)^d V_d(R)²`, for `|v| ≥ 2R` and `t ≤ T`
/// `p(t,x,v) ≤ A t^{-2d} exp(-|v|²/(16t))`, and with
/// `C = max(2R + T, 32d, 16, A)`
/// `p(t,x,v) ≤ C e^{-|v|/C}` whenever `|v| ≥ C`; `p ≤ Γ` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpDecayEnvelope {
    pub dim: usize,
    pub gamma: f64,
    pub radius: f64,
    pub horizon: f64,
    pub prefactor: f64,
    pub constant: f64,
}

impl ExpDecayEnvelope {
    pub fn new(f0: &InitialDensity, horizon: f64) -> Result<Self> {
        check_time(horizon)?;
        let d = f0.dim();
        let r = f0.radius();
        let vol = unit_ball_volume(d) * r.powi(d as i32);
        let prefactor = f0.gamma() * (SQRT3 / std::f64::consts::PI).powi(d as i32) * vol * vol;
        let constant = (2.0 * r + horizon).max(32.0 * d as f64).max(16.0).max(prefactor);
        Ok(Self {
            dim: d,
            gamma: f0.gamma(),
            radius: r,
            horizon,
            prefactor,
            constant,
        })
    }

    /// Envelope `C e^{-|v|/C} 1{|v|≥C} + Γ 1{|v|<C}`.
    pub fn bound(&self, v: &[f64]) -> f64 {
        let s = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if s >= self.constant {
            self.constant * (-s / self.constant).exp()
        } else {
            self.gamma
        }
    }

    /// Gaussian-tail bound `A t^{-2d} e^{-|v|²/(16t)}`, valid for `|v| ≥ 2R`.
    pub fn intermediate(&self, t: f64, v: &[f64]) -> Option<f64> {
        let s2: f64 = v.iter().map(|c| c * c).sum();
        if s2.sqrt() < 2.0 * self.radius || t > self.horizon {
            return None;
        }
        Some(self.prefactor * t.powi(-2 * self.dim as i32) * (-s2 / (16.0 * t)).exp())
    }
}

/// Green's function value with its truncation bracket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenValue {
    /// ∫_0^{T_max} 𝖯_t dt.
    pub value: f64,
    /// Upper bound on ∫_{T_max}^∞ 𝖯_t dt.
    pub tail_bound: f64,
    pub quadrature_error: f64,
}

impl GreenValue {
    pub fn lower(&self) -> f64 {
        self.value - self.quadrature_error
    }
    pub fn upper(&self) -> f64 {
        self.value + self.tail_bound + self.quadrature_error
    }
    pub fn bracket_width(&self) -> f64 {
        self.upper() - self.lower()
    }
}

/// One row of a dyadic shell sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellTerm {
    pub shell: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub term: f64,
    pub partial_sum: f64,
}

/// Settings and evaluators for the kernel-derived quantities.
#[derive(Debug, Clone, Copy)]
pub struct KernelToolkit {
    pub dim: usize,
    pub quad: QuadSettings,
    /// Upper limit of the Green's time integral.
    pub t_max: f64,
    /// Lower limit of the Green's time integral; 𝖯_t is negligible below it
    /// away from the diagonal.
    pub t_min: f64,
}

impl KernelToolkit {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        Ok(Self {
            dim,
            quad: QuadSettings::new(1e-13, 1e-9).with_max_intervals(4000),
            t_max: 50.0,
            t_min: 1e-14,
        })
    }

    pub fn with_t_max(mut self, t_max: f64) -> Result<Self> {
        if !(t_max > self.t_min) {
            return Err(invalid("t_max", "must exceed the lower time cutoff"));
        }
        self.t_max = t_max;
        Ok(self)
    }

    pub fn with_quad(mut self, quad: QuadSettings) -> Self {
        self.quad = quad;
        self
    }

    /// Integrability exponent η = 1/(8d).
    pub fn eta(&self) -> f64 {
        1.0 / (8.0 * self.dim as f64)
    }

    /// Closed-form ∫_{T_max}^∞ (√3/(2πt²))^d dt.
    pub fn tail_bound(&self) -> f64 {
        let d = self.dim as f64;
        (SQRT3 / (2.0 * std::f64::consts::PI)).powf(d) * self.t_max.powf(1.0 - 2.0 * d) / (2.0 * d - 1.0)
    }

    /// G(X,Y) = ∫_0^∞ 𝖯_t(X,Y) dt, truncated to [t_min, T_max] and
    /// integrated in s = ln t.
    pub fn greens_function(&self, x: &[f64], v: &[f64], y: &[f64], w: &[f64]) -> Result<GreenValue> {
        check_dims(y, w, x, v)?;
        if x.len() != self.dim {
            return Err(invalid("point", "dimension mismatch with toolkit"));
        }
        if x == y && v == w {
            return Err(invalid("X", "Green's function is singular on the diagonal"));
        }
        // peak of the integrand sits near the intrinsic scale of X - Y
        let dv2: f64 = v.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
        let dx2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let scale = dv2.max(dx2.powf(1.0 / 3.0)).max(1e-300);
        let peak = scale.ln().clamp(self.t_min.ln(), self.t_max.ln());
        let (lo, hi) = (self.t_min.ln(), self.t_max.ln());
        let mut breaks = vec![peak - 4.0, peak - 1.0, peak, peak + 1.0, peak + 4.0];
        // the drift c = (x - y) - t v vanishes near t = Δx/v along each axis
        for (k, &vk) in v.iter().enumerate() {
            let t_star = (x[k] - y[k]) / vk;
            if t_star.is_finite() && t_star > self.t_min && t_star < self.t_max {
                let l = t_star.ln();
                breaks.extend([l - 1.0, l - 0.25, l, l + 0.25, l + 1.0]);
            }
        }
        let r = integrate_with_breaks(
            |s| {
                let t = s.exp();
                density_unchecked(KAPPA_GREEN, t, y, w, x, v) * t
            },
            lo,
            hi,
            &breaks,
            &self.quad,
        );
        let value = r.require(&self.quad)?;
        Ok(GreenValue {
            value,
            tail_bound: self.tail_bound(),
            quadrature_error: r.error,
        })
    }

    /// ∫ over the Euclidean shell `r_in < |Y - X| ≤ r_out` of G(X,Y)^{1+η},
    /// in polar coordinates (d = 1 only).
    pub fn shell_integral(&self, x: &[f64], v: &[f64], r_in: f64, r_out: f64, settings: &QuadSettings) -> Result<QuadResult> {
        if self.dim != 1 {
            return Err(invalid("dim", "shell integrals are implemented for d = 1"));
        }
        if !(r_in > 0.0 && r_out > r_in) {
            return Err(invalid("radius", "need 0 < r_in < r_out"));
        }
        let p = 1.0 + self.eta();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut failure: Option<Error> = None;
        let mut ok = true;
        let mut inner_err: f64 = 0.0;
        // G is sharply peaked where Y - X is nearly along the v axis.
        let breaks = [-half_pi, half_pi];
        let radial = integrate(
            |lr| {
                let r = lr.exp();
                let ang = integrate_with_breaks(
                    |phi| {
                        let (s, c) = phi.sin_cos();
                        let y = [x[0] + r * c];
                        let w = [v[0] + r * s];
                        match self.greens_function(x, v, &y, &w) {
                            Ok(g) => g.value.powf(p),
                            Err(e) => {
                                failure.get_or_insert(e);
                                0.0
                            }
                        }
                    },
                    -std::f64::consts::PI,
                    std::f64::consts::PI,
                    &breaks,
                    settings,
                );
                ok &= ang.converged;
                inner_err = inner_err.max(ang.error);
                ang.value * r * r
            },
            r_in.ln(),
            r_out.ln(),
            settings,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(QuadResult {
            converged: radial.converged && ok,
            error: radial.error + inner_err * r_out * r_out * (r_out / r_in).ln(),
            ..radial
        })
    }

    /// Dyadic shells `(r₀ 2^{-k-1}, r₀ 2^{-k}]`, k = 0..shells, and their partial sums.
    pub fn shell_sums(&self, x: &[f64], v: &[f64], r0: f64, shells: usize, settings: &QuadSettings) -> Result<Vec<ShellTerm>> {
        let mut out = Vec::with_capacity(shells);
        let mut acc = 0.0;
        for k in 0..shells {
            let outer = r0 * 0.5f64.powi(k as i32);
            let inner = outer * 0.5;
            let term = self.shell_integral(x, v, inner, outer, settings)?.value;
            acc += term;
            out.push(ShellTerm {
                shell: k,
                inner_radius: inner,
                outer_radius: outer,
                term,
                partial_sum: acc,
            });
        }
        Ok(out)
    }

    /// p(t,x,v) = ∫∫ f0(x₀,v₀) 𝖯*_t((x₀,v₀),(x,v)) dx₀ dv₀.
    pub fn free_density(&self, f0: &InitialDensity, t: f64, x: &[f64], v: &[f64]) -> Result<f64> {
        check_time(t)?;
        if x.len() != f0.dim() || v.len() != f0.dim() {
            return Err(invalid("point", "dimension mismatch with f0"));
        }
        if f0.dim() == 1 && f0.shape() == InitialShape::UniformBall {
            free_density_uniform_1d(f0, t, x[0], v[0], &self.quad)
        } else {
            self.free_density_nested(f0, t, x, v)
        }
    }

    /// Generic nested quadrature over the support of f0, coordinates
    /// ordered `(v₀, x₀)`.
    pub fn free_density_nested(&self, f0: &InitialDensity, t: f64, x: &[f64], v: &[f64]) -> Result<f64> {
        check_time(t)?;
        let d = f0.dim();
        let st = t.sqrt();
        let sigma = (t * t * t / 12.0).sqrt();
        let breaks = |k: usize, prefix: &[f64]| -> Vec<f64> {
            if k < d {
                let c = v[k];
                vec![c - 4.0 * st, c - st, c, c + st, c + 4.0 * st]
            } else {
                let a = k - d;
                let m = x[a] - 0.5 * t * (prefix[a] + v[a]);
                vec![m - 6.0 * sigma, m - sigma, m, m + sigma, m + 6.0 * sigma]
            }
        };
        let f = |z: &[f64]| {
            let (v0, x0) = z.split_at(d);
            let r2: f64 = z.iter().map(|c| c * c).sum();
            let dens = f0.eval_sq(r2);
            if dens == 0.0 {
                0.0
            } else {
                dens * density_unchecked(KAPPA_PARTICLE, t, x0, v0, x, v)
            }
        };
        let levels: Vec<QuadSettings> = (0..2 * d)
            .map(|k| {
                let tighten = 10f64.powi(-(k as i32));
                QuadSettings::new(self.quad.abs_tol * tighten, self.quad.rel_tol).with_max_intervals(self.quad.max_intervals)
            })
            .collect();
        let r = ball_integral(2 * d, f0.radius(), &breaks, &f, &levels);
        r.require(&self.quad)
    }
}

/// d = 1, uniform ball: the x₀-integral is a difference of normal CDFs.
fn free_density_uniform_1d(f0: &InitialDensity, t: f64, x: f64, v: f64, settings: &QuadSettings) -> Result<f64> {
    let r = f0.radius();
    let st = t.sqrt();
    let sigma = (t * t * t / 12.0).sqrt();
    let norm = 1.0 / (st * (2.0 * std::f64::consts::PI).sqrt());
    let integrand = |v0: f64| {
        let h = (r * r - v0 * v0).max(0.0).sqrt();
        let m = x - 0.5 * t * (v + v0);
        let b = (v - v0) / st;
        let g = norm * (-0.5 * b * b).exp();
        if g == 0.0 {
            return 0.0;
        }
        g * std_normal_cdf_diff((m + h) / sigma, (m - h) / sigma)
    };
    let lo = (v - 40.0 * st).max(-r);
    let hi = (v + 40.0 * st).min(r);
    if lo >= hi {
        return Ok(0.0);
    }
    let breaks = [v - 4.0 * st, v - st, v, v + st, v + 4.0 * st];
    let res = integrate_with_breaks(integrand, lo, hi, &breaks, settings);
    Ok(f0.gamma() * res.require(settings)?)
}
