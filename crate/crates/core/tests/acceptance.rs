//! Acceptance suite: one PASS/FAIL line per criterion, each against its
//! runtime budget.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use kinetic_annihilation::harness::{
    chapman_kolmogorov, kernel_mass, run_compare, run_identity_audit, shell_table, shells_cauchy, simulate_one,
    ExperimentConfig, Mode, SHELL_BASE_POINTS,
};
use kinetic_annihilation::kernels::{one_particle_kernel, volume_lambda, ExpDecayEnvelope, KernelToolkit, KAPPA_GREEN, KAPPA_PARTICLE};
use kinetic_annihilation::kinetic_pde::{gronwall_paired_run, l1_contraction_check, solve, DensityField, PhaseGrid, SolveOptions};
use kinetic_annihilation::model::{InitialDensity, InitialShape};
use kinetic_annihilation::particle_sim::{Observation, StepPlan};
use kinetic_annihilation::quadrature::QuadSettings;
use num::{BigInt, BigRational, Signed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normalization() -> Outcome {
    let quad = QuadSettings::new(1e-10, 1e-10);
    let mut worst: f64 = 0.0;
    for &(d, t) in &[(1usize, 0.5), (1, 1.0), (2, 1.0)] {
        let bases: &[(f64, f64)] = if d == 1 { &[(0.3, -0.2), (-1.1, 0.8)] } else { &[(0.3, -0.2)] };
        for &(x, v) in bases {
            let (xs, vs) = (vec![x; d], vec![v; d]);
            let p = kernel_mass(KAPPA_GREEN, t, &xs, &vs, true, &quad).map_err(err)?;
            let q = kernel_mass(KAPPA_PARTICLE, t, &xs, &vs, false, &quad).map_err(err)?;
            worst = worst.max((p - 1.0).abs()).max((q - 1.0).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max |mass - 1| = {worst:.2e}")))
}

fn chapman() -> Outcome {
    let quad = QuadSettings::new(1e-12, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x0 = rng.random_range(-1.0..1.0);
        let v0 = rng.random_range(-1.0..1.0);
        let x = x0 + 0.5 * v0 + rng.random_range(-0.6..0.6);
        let v = v0 + rng.random_range(-1.0..1.0);
        let composed = chapman_kolmogorov(0.5, 0.5, x0, v0, x, v, &quad).map_err(err)?;
        let direct = one_particle_kernel(1.0, &[x0], &[v0], &[x], &[v]).map_err(err)?;
        worst = worst.max((composed - direct).abs());
    }
    Ok((worst <= 1e-4, format!("max residual = {worst:.2e} over 20 pairs")))
}

fn density_bounds() -> Outcome {
    let f0 = InitialDensity::new(1, 1.0, InitialShape::UniformBall).map_err(err)?;
    let horizon = 1.0;
    let env = ExpDecayEnvelope::new(&f0, horizon).map_err(err)?;
    let tk = KernelToolkit::new(1).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sup_ratio, mut env_margin, mut gauss_margin) = (0.0f64, f64::INFINITY, f64::INFINITY);
    let mut pass = true;
    for k in 0..1200 {
        let t = rng.random_range(1e-3..horizon);
        let x = rng.random_range(-4.0..4.0);
        // the last 200 points probe the exponential tail |v| ≥ C
        let v = if k < 1000 {
            rng.random_range(-5.0..5.0)
        } else {
            rng.random_range(env.constant..3.0 * env.constant) * if k % 2 == 0 { 1.0 } else { -1.0 }
        };
        let p = tk.free_density(&f0, t, &[x], &[v]).map_err(err)?;
        sup_ratio = sup_ratio.max(p / f0.gamma());
        pass &= p <= f0.gamma();
        let b = env.bound(&[v]);
        env_margin = env_margin.min(b - p);
        pass &= p <= b;
        if let Some(g) = env.intermediate(t, &[v]) {
            gauss_margin = gauss_margin.min(g - p);
            pass &= p <= g;
        }
    }
    Ok((
        pass,
        format!(
            "sup p/Γ = {sup_ratio:.6}, C = {}, min envelope margin = {env_margin:.2e}, min Gaussian-tail margin = {gauss_margin:.2e}",
            env.constant
        ),
    ))
}

fn riccati() -> Outcome {
    let rho0 = 1.5;
    let grid = PhaseGrid::new(1, 16, 384, 2.0, 12.0).map_err(err)?;
    let init = DensityField::from_fn(grid, |_, v| rho0 * (-0.5 * v[0] * v[0]).exp() / (2.0 * std::f64::consts::PI).sqrt())
        .map_err(err)?;
    let traj = solve(&init, 2.0, &SolveOptions::new(0.01).observe(Observation::EveryStep)).map_err(err)?;
    let mut worst: f64 = 0.0;
    for s in &traj.snapshots {
        let exact = rho0 / (1.0 + 2.0 * rho0 * s.t);
        for r in s.rho() {
            worst = worst.max((r - exact).abs() / exact);
        }
    }
    Ok((worst <= 5e-3, format!("max relative error = {worst:.2e} on [0, 2]")))
}

fn free_equation() -> Outcome {
    let f0 = InitialDensity::new(1, 1.0, InitialShape::UniformBall).map_err(err)?;
    let grid = PhaseGrid::for_horizon(1, 256, 256, 1.0, 1.0).map_err(err)?;
    let init = DensityField::from_initial(grid.clone(), &f0, 8).map_err(err)?;
    let traj = solve(&init, 1.0, &SolveOptions::new(0.125).without_sink()).map_err(err)?;
    let tk = KernelToolkit::new(1).map_err(err)?;
    let exact = DensityField::from_fn(grid, |x, v| tk.free_density(&f0, 1.0, x, v).unwrap_or(f64::NAN)).map_err(err)?;
    let rel = traj.last().l1_distance(&exact).map_err(err)? / exact.mass();
    Ok((rel <= 0.02, format!("relative L1 error = {:.3}%", 100.0 * rel)))
}

fn martingale_variance() -> Outcome {
    let mut cfg = ExperimentConfig::reference(Mode::Audit);
    cfg.seeds = 1024;
    let report = run_identity_audit(&cfg).map_err(err)?;
    let ok = report.variance_ratios.iter().all(|r| (1.6..=2.6).contains(r));
    let z: Vec<String> = report.levels.iter().map(|l| format!("{:.2}", l.mean_z)).collect();
    let flagged: usize = report.levels.iter().map(|l| l.flagged).sum();
    Ok((
        ok,
        format!(
            "variance ratios {:?}, |mean|/se per N {:?}, {flagged} runs beyond 6σ",
            report.variance_ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            z
        ),
    ))
}

fn bookkeeping() -> Outcome {
    // every harness run asserts bookkeeping; here a sweep over sizes,
    // seeds and steps with every step observed
    let mut cfg = ExperimentConfig::reference(Mode::Simulate);
    let mut checked = 0;
    let mut events = 0;
    for (k, &n) in [2usize, 3, 17, 250, 500, 1000, 2000].iter().enumerate() {
        for (s, &dt) in [0.05, 0.01].iter().enumerate() {
            cfg.dt = dt;
            for rep in 0..8u64 {
                let seed = 1000 * k as u64 + 100 * s as u64 + rep;
                let plan = StepPlan::new(dt).observe(Observation::EveryStep);
                let traj = simulate_one(&cfg, n, seed, &plan).map_err(err)?;
                let mut prev = n;
                for snap in &traj.snapshots {
                    let dead = traj.events.iter().filter(|e| e.t <= snap.t).count();
                    if snap.len() != n - 2 * dead || snap.len() % 2 != n % 2 || snap.len() > prev {
                        return Ok((false, format!("count mismatch at N = {n}, seed {seed}, t = {}", snap.t)));
                    }
                    prev = snap.len();
                }
                if 2 * traj.events.len() > n {
                    return Ok((false, format!("events exceed N/2 at N = {n}")));
                }
                checked += 1;
                events += traj.events.len();
            }
        }
    }
    Ok((true, format!("{checked} trajectories, {events} events, zero violations")))
}

fn scaling_limit() -> Outcome {
    let cfg = ExperimentConfig::reference(Mode::Compare);
    let r = run_compare(&cfg).map_err(err)?;
    let fit = r.slope.ok_or("no slope fit")?;
    let means: Vec<String> = r.levels.iter().map(|l| format!("{}:{:.3e}", l.n, l.mean_distance)).collect();
    Ok((
        r.strictly_decreasing && fit.negative_with_confidence(),
        format!(
            "means {means:?}, slope {:.3} with 95% band [{:.3}, {:.3}], {} seeds per N",
            fit.slope, fit.lower_95, fit.upper_95, cfg.seeds
        ),
    ))
}

fn shells() -> Outcome {
    let cfg = ExperimentConfig::reference(Mode::KernelCheck);
    let rows = shell_table(&cfg, &SHELL_BASE_POINTS).map_err(err)?;
    let mut worst: f64 = 0.0;
    for b in 0..SHELL_BASE_POINTS.len() {
        let sums: Vec<f64> = rows.iter().filter(|r| r.0 == b).map(|r| r.1.partial_sum).collect();
        let last = *sums.last().ok_or("empty shell table")?;
        for s in &sums[12..] {
            worst = worst.max((last - s).abs() / last);
        }
    }
    Ok((
        shells_cauchy(&rows, 12, 0.01),
        format!("max relative spread beyond shell 12 = {worst:.2e} at {} base points", SHELL_BASE_POINTS.len()),
    ))
}

fn lambda_doubling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let zero = BigRational::from_integer(BigInt::from(0));
    let mut min_margin = f64::INFINITY;
    for k in 0..10_000 {
        let d = 1 + k % 3;
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-100.0..100.0)).collect();
        let delta = 10f64.powf(rng.random_range(-4.0..2.0));
        let exact = |dl: &BigRational| {
            let s = v.iter().fold(zero.clone(), |a, c| a + BigRational::from_float(*c).unwrap().abs());
            s * num::pow(dl.clone(), 4 * d - 1) + num::pow(dl.clone(), 4 * d)
        };
        let dl = BigRational::from_float(delta).unwrap();
        let two = BigRational::from_integer(BigInt::from(2));
        let cap = num::pow(two.clone(), 4 * d);
        let lhs = exact(&(dl.clone() * two));
        let rhs = cap * exact(&dl);
        if lhs > rhs {
            return Ok((false, format!("doubling violated at v = {v:?}, δ = {delta}")));
        }
        let ratio = volume_lambda(&v, 2.0 * delta).map_err(err)? / volume_lambda(&v, delta).map_err(err)?;
        min_margin = min_margin.min(2f64.powi(4 * d as i32) - ratio);
    }
    Ok((true, format!("10000 points, exact margins nonnegative, min float margin 2^(4d) - ratio = {min_margin:.3e}")))
}

fn contraction() -> Outcome {
    let grid = PhaseGrid::new(1, 64, 64, 6.0, 6.0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let field = |rng: &mut ChaCha8Rng| {
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
        let w: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..1.0)).collect();
        DensityField::from_fn(grid.clone(), move |x, v| {
            w[0] * (-(x[0] - c[0]).powi(2) / (0.2 + c[2].abs()) - (v[0] - c[1]).powi(2)).exp()
                + w[1] * (-(x[0] - c[3]).powi(2) - (v[0] - c[4]).powi(2) / (0.2 + c[5].abs())).exp()
        })
    };
    let mut min_margin = f64::INFINITY;
    let mut pass = true;
    for _ in 0..100 {
        let f = field(&mut rng).map_err(err)?;
        let g = field(&mut rng).map_err(err)?;
        let dt = rng.random_range(0.01..0.25);
        let c = l1_contraction_check(&f, &g, dt).map_err(err)?;
        pass &= c.passed;
        min_margin = min_margin.min(c.margin());
    }
    let f0 = InitialDensity::new(1, 1.0, InitialShape::UniformBall).map_err(err)?;
    let g0 = InitialDensity::new(1, 1.0, InitialShape::SmoothBall).map_err(err)?;
    let pgrid = PhaseGrid::for_horizon(1, 128, 128, 1.0, 1.0).map_err(err)?;
    let f = DensityField::from_initial(pgrid.clone(), &f0, 4).map_err(err)?;
    let g = DensityField::from_initial(pgrid, &g0, 4).map_err(err)?;
    let stab = gronwall_paired_run(&f, &g, 1.0, 0.05).map_err(err)?;
    let worst = stab.records.iter().filter(|r| r.t > 0.0).map(|r| r.distance / r.bound).fold(0.0, f64::max);
    Ok((
        pass && stab.holds(),
        format!(
            "100 pairs nonexpansive (min margin {min_margin:.2e}); Gronwall C = {:.3}, max distance/bound over t > 0 = {worst:.3}",
            stab.constant
        ),
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "kernel normalization", budget: minutes(1), run: normalization },
        Criterion { id: 2, name: "Chapman-Kolmogorov residual", budget: minutes(5), run: chapman },
        Criterion { id: 3, name: "free density bounds", budget: minutes(5), run: density_bounds },
        Criterion { id: 4, name: "Riccati mass decay", budget: minutes(1), run: riccati },
        Criterion { id: 5, name: "free equation L1 match", budget: minutes(5), run: free_equation },
        Criterion { id: 6, name: "martingale variance scaling", budget: minutes(30), run: martingale_variance },
        Criterion { id: 7, name: "annihilation bookkeeping", budget: minutes(5), run: bookkeeping },
        Criterion { id: 8, name: "scaling-limit experiment", budget: minutes(120), run: scaling_limit },
        Criterion { id: 9, name: "Green shell integrability", budget: minutes(10), run: shells },
        Criterion { id: 10, name: "Lambda doubling", budget: minutes(1), run: lambda_doubling },
        Criterion { id: 11, name: "L1 contraction and Gronwall stability", budget: minutes(5), run: contraction },
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_none_or(|k| k == c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed <= c.budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {}: {} [{:.1}s of {}s]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
