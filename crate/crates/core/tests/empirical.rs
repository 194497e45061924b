use kinetic_annihilation::empirical::{
    pair, read_functional_csv, weak_distance, write_functional_csv, ConstantFunction, EmpiricalMeasure,
    FunctionalRow, LinearInTime, TestFamily, TestFunction,
};
use kinetic_annihilation::harness::{identity_terms, ExperimentConfig, Mode};
use kinetic_annihilation::model::{InitialDensity, InitialShape, ScalingRule};
use kinetic_annihilation::particle_sim::{run, Observation, ParticleSystem, StepPlan};
use proptest::prelude::*;

fn measure(points: &[(f64, f64)], n0: usize) -> EmpiricalMeasure {
    EmpiricalMeasure {
        dim: 1,
        n0,
        x: points.iter().map(|p| p.0).collect(),
        v: points.iter().map(|p| p.1).collect(),
    }
}

fn points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weak_distance_is_a_pseudometric(a in points(), b in points(), c in points()) {
        let fam = TestFamily::new(1, 12).unwrap();
        let (ma, mb, mc) = (measure(&a, 60), measure(&b, 60), measure(&c, 60));
        let d = |p: &EmpiricalMeasure, q: &EmpiricalMeasure| weak_distance(p, q, &fam, 12, 0.0).unwrap();
        prop_assert_eq!(d(&ma, &ma), 0.0);
        prop_assert!((d(&ma, &mb) - d(&mb, &ma)).abs() < 1e-15);
        prop_assert!(d(&ma, &mc) <= d(&ma, &mb) + d(&mb, &mc) + 1e-15);
        prop_assert!(d(&ma, &mb) <= 1.0);
    }

    #[test]
    fn generator_matches_finite_differences(k in 1usize..16, x in -2.0f64..2.0, v in -2.0f64..2.0) {
        let phi = TestFamily::element(1, k).unwrap();
        let h = 1e-4;
        let f = |x: f64, v: f64| phi.value(0.0, &[x], &[v]);
        let dx = (f(x + h, v) - f(x - h, v)) / (2.0 * h);
        let dv = (f(x, v + h) - f(x, v - h)) / (2.0 * h);
        let dvv = (f(x, v + h) - 2.0 * f(x, v) + f(x, v - h)) / (h * h);
        let scale = phi.bounds().c2.max(1.0);
        prop_assert!((phi.transport_term(0.0, &[x], &[v]) - v * dx).abs() < 1e-5 * scale);
        prop_assert!((phi.half_laplacian_v(0.0, &[x], &[v]) - 0.5 * dvv).abs() < 1e-4 * scale);
        prop_assert!((phi.grad_v_sq(0.0, &[x], &[v]) - dv * dv).abs() < 1e-5 * scale * scale);
    }

    #[test]
    fn family_elements_respect_their_bounds(k in 1usize..40, x in -6.0f64..6.0, v in -6.0f64..6.0) {
        let phi = TestFamily::element(1, k).unwrap();
        let b = phi.bounds();
        prop_assert!(phi.value(0.0, &[x], &[v]).abs() <= b.sup * (1.0 + 1e-12));
        if x.hypot(v) > phi.support_radius() {
            prop_assert_eq!(phi.value(0.0, &[x], &[v]), 0.0);
        }
    }
}

#[test]
fn linear_in_time_adds_the_time_derivative() {
    let inner = TestFamily::element(1, 3).unwrap();
    let phi = LinearInTime {
        inner: inner.clone(),
        intercept: 2.0,
        slope: -0.5,
    };
    let (x, v) = ([0.3], [0.1]);
    let t = 0.4;
    assert!((phi.value(t, &x, &v) - 1.8 * inner.value(t, &x, &v)).abs() < 1e-15);
    let expected = -0.5 * inner.value(t, &x, &v) + 1.8 * inner.generator(t, &x, &v);
    assert!((phi.generator(t, &x, &v) - expected).abs() < 1e-14);
}

#[test]
fn zero_test_function_gives_zero_residuals() {
    let f0 = InitialDensity::new(1, 1.0, InitialShape::UniformBall).unwrap();
    let zero = ConstantFunction {
        dim: 1,
        value: 0.0,
        radius: 1e9,
    };
    for seed in 0..5 {
        let mut sys = ParticleSystem::from_initial_density(&f0, 300, &ScalingRule::local(1), seed).unwrap();
        let traj = run(&mut sys, 1.0, &StepPlan::new(0.02).observe(Observation::EveryStep)).unwrap();
        let (inc, gen, comp) = identity_terms(&traj, &zero).unwrap();
        assert_eq!((inc, gen, comp), (0.0, 0.0, 0.0));
    }
}

#[test]
fn constant_test_function_counts_mass() {
    // with φ ≡ 1 on the support the generator term vanishes and the
    // increment is minus the removed mass
    let f0 = InitialDensity::new(1, 1.0, InitialShape::UniformBall).unwrap();
    let one = ConstantFunction {
        dim: 1,
        value: 1.0,
        radius: 1e9,
    };
    let mut sys = ParticleSystem::from_initial_density(&f0, 400, &ScalingRule::local(1), 5).unwrap();
    let traj = run(&mut sys, 1.0, &StepPlan::new(0.02).observe(Observation::EveryStep)).unwrap();
    let (inc, gen, _) = identity_terms(&traj, &one).unwrap();
    assert_eq!(gen, 0.0);
    assert!((inc + 2.0 * traj.events.len() as f64 / 400.0).abs() < 1e-12);
    let mu = EmpiricalMeasure::at(&traj, traj.snapshots.len() - 1);
    assert!((pair(&mu, &one, 1.0) - mu.mass()).abs() < 1e-15);
}

#[test]
fn functional_rows_round_trip_through_csv() {
    let rows = vec![
        FunctionalRow { n: 250, seed: 17, t: 1.0, name: "weak_distance".into(), value: 0.1 + 0.2 },
        FunctionalRow { n: 500, seed: u64::MAX, t: 0.3, name: "mass".into(), value: -1.234_567_890_123e-17 },
    ];
    let mut buf = Vec::new();
    write_functional_csv(&mut buf, "deadbeef", &rows).unwrap();
    let (hash, back) = read_functional_csv(buf.as_slice()).unwrap();
    assert_eq!(hash, "deadbeef");
    assert_eq!(back, rows);
}

#[test]
fn audit_reference_config_is_valid() {
    ExperimentConfig::reference(Mode::Audit).validate().unwrap();
}
