//! Interaction mollifier, initial data and the ε(N) scaling rule shared by
//! the particle simulator and the PDE solver.
//!
//! The shipped mollifier profiles are radial bumps on the unit ball:
//!
//! * interaction kernel θ: `c |x|² exp(-1/(1-|x|²))`, which vanishes at the
//!   origin so diagonal terms of the pair sums are negligible;
//! * averaging kernel η: `c exp(-1/(1-|x|²))`.
//!
//! Neither has a closed-form normalization; `c` is computed once by
//! adaptive quadrature of the radial integral.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::tgamma as gamma;

use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, QuadSettings};
use crate::rng;

/// Surface area of the unit sphere S^{n-1} in ℝ^n.
pub fn unit_sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in ℝ^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    unit_sphere_area(n) / n as f64
}

/// Radial profile of a mollifier, as a function of `s = |x|²` on `s < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BumpProfile {
    /// `s · exp(-1/(1-s))`: zero at the origin.
    Weighted,
    /// `exp(-1/(1-s))`.
    Plain,
}

impl BumpProfile {
    #[inline]
    fn raw(self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        let bump = (-1.0 / (1.0 - s)).exp();
        match self {
            BumpProfile::Weighted => s * bump,
            BumpProfile::Plain => bump,
        }
    }

    fn raw_sup(self) -> f64 {
        match self {
            // d/ds [s e^{-1/(1-s)}] = 0  ⇔  (1-s)² = s
            BumpProfile::Weighted => {
                let s = (3.0 - 5f64.sqrt()) / 2.0;
                self.raw(s)
            }
            BumpProfile::Plain => (-1f64).exp(),
        }
    }
}

/// Smooth, radial, nonnegative kernel supported in the unit ball with unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Mollifier {
    dim: usize,
    profile: BumpProfile,
    norm: f64,
}

impl Mollifier {
    pub fn new(dim: usize, profile: BumpProfile) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        let settings = QuadSettings::new(1e-14, 1e-12);
        let radial = integrate(
            |r| profile.raw(r * r) * r.powi(dim as i32 - 1),
            0.0,
            1.0,
            &settings,
        )
        .require(&settings)?;
        let mass = unit_sphere_area(dim) * radial;
        Ok(Self {
            dim,
            profile,
            norm: 1.0 / mass,
        })
    }

    /// The interaction kernel θ.
    pub fn interaction(dim: usize) -> Result<Self> {
        Self::new(dim, BumpProfile::Weighted)
    }

    /// The averaging kernel η.
    pub fn averaging(dim: usize) -> Result<Self> {
        Self::new(dim, BumpProfile::Plain)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn profile(&self) -> BumpProfile {
        self.profile
    }

    pub fn normalization(&self) -> f64 {
        self.norm
    }

    /// sup θ over ℝ^d.
    pub fn sup(&self) -> f64 {
        self.norm * self.profile.raw_sup()
    }

    /// θ as a function of the squared norm.
    #[inline]
    pub fn unit_sq(&self, r2: f64) -> f64 {
        self.norm * self.profile.raw(r2)
    }

    /// θ(x).
    pub fn unit(&self, x: &[f64]) -> f64 {
        self.unit_sq(x.iter().map(|c| c * c).sum())
    }

    /// θ^ε as a function of the squared norm; no parameter checks.
    #[inline]
    pub fn scaled_sq(&self, eps: f64, r2: f64) -> f64 {
        let inv = 1.0 / eps;
        inv.powi(self.dim as i32) * self.unit_sq(r2 * inv * inv)
    }

    /// θ^ε(x) = ε^{-d} θ(x/ε) for ε ∈ (0, 1].
    pub fn eval(&self, eps: f64, x: &[f64]) -> Result<f64> {
        check_eps(eps)?;
        if x.len() != self.dim {
            return Err(invalid("x", format!("expected {} coordinates, got {}", self.dim, x.len())));
        }
        Ok(self.scaled_sq(eps, x.iter().map(|c| c * c).sum()))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(invalid("eps", format!("must lie in (0, 1], got {eps}")));
    }
    Ok(())
}

/// θ^ε(x) for a mollifier `m`.
pub fn mollifier_eval(m: &Mollifier, eps: f64, x: &[f64]) -> Result<f64> {
    m.eval(eps, x)
}

/// Shape of a shipped initial density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialShape {
    /// Constant density on the ball |(x,v)| ≤ R.
    UniformBall,
    /// `Γ (1 - |(x,v)|²/R²)²` on the ball.
    SmoothBall,
}

/// Compactly supported, bounded probability density f0 on ℝ^{2d}.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDensity {
    dim: usize,
    radius: f64,
    gamma: f64,
    shape: InitialShape,
}

impl InitialDensity {
    pub fn new(dim: usize, radius: f64, shape: InitialShape) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid("radius", format!("must be positive, got {radius}")));
        }
        let n = 2 * dim;
        let ball = unit_ball_volume(n) * radius.powi(n as i32);
        let gamma = match shape {
            InitialShape::UniformBall => 1.0 / ball,
            InitialShape::SmoothBall => {
                // ∫_0^1 (1-s²)² s^{n-1} ds = 1 / (h (h+1) (h+2)), h = n/2
                let h = n as f64 / 2.0;
                let radial = 1.0 / (h * (h + 1.0) * (h + 2.0));
                1.0 / (unit_sphere_area(n) * radius.powi(n as i32) * radial)
            }
        };
        Ok(Self {
            dim,
            radius,
            gamma,
            shape,
        })
    }

    /// The reference choice: uniform on the unit ball.
    pub fn uniform_ball(dim: usize) -> Result<Self> {
        Self::new(dim, 1.0, InitialShape::UniformBall)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Support radius R.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Uniform bound Γ.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn shape(&self) -> InitialShape {
        self.shape
    }

    /// f0 at the phase point (x, v).
    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let r2: f64 = x.iter().chain(v).map(|c| c * c).sum();
        self.eval_sq(r2)
    }

    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        let u = r2 / (self.radius * self.radius);
        if u > 1.0 {
            return 0.0;
        }
        match self.shape {
            InitialShape::UniformBall => self.gamma,
            InitialShape::SmoothBall => self.gamma * (1.0 - u) * (1.0 - u),
        }
    }

    /// E|(x,v)|² under f0.
    pub fn second_moment(&self) -> f64 {
        let n = (2 * self.dim) as f64;
        let r2 = self.radius * self.radius;
        match self.shape {
            InitialShape::UniformBall => n / (n + 2.0) * r2,
            // ratio of ∫(1-s²)² s^{n+1} to ∫(1-s²)² s^{n-1}
            InitialShape::SmoothBall => {
                let h = n / 2.0;
                h / (h + 3.0) * r2
            }
        }
    }
}

/// One phase-space sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Draw `n` i.i.d. samples from f0 by rejection against the uniform law on
/// the support ball, using the initial-condition stream of `seed`.
pub fn sample_initial(f0: &InitialDensity, n: usize, seed: u64) -> Result<Vec<PhasePoint>> {
    if n == 0 {
        return Err(invalid("n", "at least one sample is required"));
    }
    let mut stream = rng::initial_stream(seed);
    sample_initial_with(f0, n, &mut stream)
}

/// As [`sample_initial`] with a caller-owned RNG.
pub fn sample_initial_with<R: Rng>(f0: &InitialDensity, n: usize, rng: &mut R) -> Result<Vec<PhasePoint>> {
    if n == 0 {
        return Err(invalid("n", "at least one sample is required"));
    }
    let d = f0.dim;
    let dim = 2 * d;
    let mut out = Vec::with_capacity(n);
    let mut z = vec![0.0; dim];
    while out.len() < n {
        let mut norm2 = 0.0;
        for c in z.iter_mut() {
            *c = rng.sample::<f64, _>(StandardNormal);
            norm2 += *c * *c;
        }
        if norm2 == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let scale = f0.radius * u.powf(1.0 / dim as f64) / norm2.sqrt();
        z.iter_mut().for_each(|c| *c *= scale);
        let value = f0.eval(&z[..d], &z[d..]);
        if value > f0.gamma * (1.0 + 1e-12) {
            return Err(Error::Invariant(format!(
                "f0 evaluated to {value} above its declared bound {}",
                f0.gamma
            )));
        }
        let accept: f64 = rng.random();
        if accept * f0.gamma < value {
            out.push(PhasePoint {
                x: z[..d].to_vec(),
                v: z[d..].to_vec(),
            });
        }
    }
    Ok(out)
}

/// How ε depends on N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScalingMode {
    /// ε = N^{-1/d}.
    Local,
    /// ε = N^{-a} with 0 < a < 1/d, so ε^{-d}/N → 0.
    SupraLocal { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRule {
    pub dim: usize,
    #[serde(flatten)]
    pub mode: ScalingMode,
}

impl ScalingRule {
    pub fn local(dim: usize) -> Self {
        Self {
            dim,
            mode: ScalingMode::Local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if let ScalingMode::SupraLocal { exponent } = self.mode {
            if !(exponent > 0.0 && exponent < 1.0 / self.dim as f64) {
                return Err(invalid(
                    "exponent",
                    format!("supra-local exponent must lie in (0, 1/d), got {exponent}"),
                ));
            }
        }
        Ok(())
    }
}

/// ε(n) under `rule`.
pub fn epsilon_of(rule: &ScalingRule, n: usize) -> Result<f64> {
    rule.validate()?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let n = n as f64;
    Ok(match rule.mode {
        ScalingMode::Local if rule.dim == 1 => 1.0 / n,
        ScalingMode::Local => n.powf(-1.0 / rule.dim as f64),
        ScalingMode::SupraLocal { exponent } => n.powf(-exponent),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_vanishes_at_origin_and_outside() {
        for d in 1..=3 {
            let m = Mollifier::interaction(d).unwrap();
            assert_eq!(m.eval(0.3, &vec![0.0; d]).unwrap(), 0.0);
            let mut x = vec![0.0; d];
            x[0] = 1.5;
            assert_eq!(m.eval(1.0, &x).unwrap(), 0.0);
            x[0] = 1.0;
            assert_eq!(m.unit(&x), 0.0);
        }
    }

    #[test]
    fn theta_is_symmetric() {
        let m = Mollifier::interaction(2).unwrap();
        for k in 0..50 {
            let a = 0.02 * k as f64 - 0.5;
            let x = [a, 0.3 - a];
            let y = [-a, a - 0.3];
            assert_eq!(m.eval(0.9, &x).unwrap(), m.eval(0.9, &y).unwrap());
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let m = Mollifier::interaction(1).unwrap();
        assert!(m.eval(0.0, &[0.1]).is_err());
        assert!(m.eval(-0.1, &[0.1]).is_err());
        assert!(m.eval(1.5, &[0.1]).is_err());
        assert!(m.eval(1.0, &[0.1]).is_ok());
    }

    #[test]
    fn scaled_sup_bound() {
        let m = Mollifier::interaction(1).unwrap();
        for &eps in &[1.0, 0.5, 0.01] {
            let bound = m.sup() / eps;
            for k in 0..2001 {
                let x = eps * (k as f64 / 1000.0 - 1.0);
                assert!(m.eval(eps, &[x]).unwrap() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn sup_is_attained_on_grid() {
        let m = Mollifier::interaction(1).unwrap();
        let grid_max = (0..100_000)
            .map(|k| m.unit(&[k as f64 / 100_000.0]))
            .fold(0.0, f64::max);
        assert!((grid_max - m.sup()).abs() < 1e-8 * m.sup());
    }

    #[test]
    fn initial_density_bound_and_support() {
        for shape in [InitialShape::UniformBall, InitialShape::SmoothBall] {
            let f0 = InitialDensity::new(1, 1.3, shape).unwrap();
            assert_eq!(f0.eval(&[1.0], &[0.9]), 0.0);
            assert!(f0.eval(&[0.1], &[0.2]) <= f0.gamma());
        }
    }

    #[test]
    fn sample_rejects_zero() {
        let f0 = InitialDensity::uniform_ball(1).unwrap();
        assert!(sample_initial(&f0, 0, 1).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let f0 = InitialDensity::new(2, 1.0, InitialShape::SmoothBall).unwrap();
        let a = sample_initial(&f0, 100, 9).unwrap();
        let b = sample_initial(&f0, 100, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_initial(&f0, 100, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn local_epsilon_examples() {
        let e = epsilon_of(&ScalingRule::local(1), 1000).unwrap();
        assert!((e - 0.001).abs() < 1e-18);
        let e = epsilon_of(&ScalingRule::local(2), 10_000).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        assert!(epsilon_of(&ScalingRule::local(1), 0).is_err());
    }

    #[test]
    fn supra_local_validation() {
        let bad = ScalingRule {
            dim: 1,
            mode: ScalingMode::SupraLocal { exponent: 1.0 },
        };
        assert!(epsilon_of(&bad, 10).is_err());
        let ok = ScalingRule {
            dim: 2,
            mode: ScalingMode::SupraLocal { exponent: 0.25 },
        };
        assert!((epsilon_of(&ok, 16).unwrap() - 0.5).abs() < 1e-15);
    }
}
