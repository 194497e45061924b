use std::fs;
use std::process::Command;

use kinetic_annihilation::empirical::read_functional_csv;
use kinetic_annihilation::harness::{
    execute, fit_slope, run_compare, ConvergenceReport, ExperimentConfig, Mode,
};
use kinetic_annihilation::kinetic_pde::DensityField;
use kinetic_annihilation::model::{BumpProfile, ScalingMode};
use proptest::prelude::*;

fn small(mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(mode);
    cfg.n_ladder = vec![100, 200];
    cfg.seeds = 3;
    cfg.dt = 0.05;
    cfg.grid.nx = 64;
    cfg.grid.nv = 64;
    cfg.grid.dt = 0.25;
    cfg.k_max = 8;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_bit_exactly(
        horizon in 0.1f64..5.0,
        radius in 0.1f64..3.0,
        seeds in 1usize..100,
        master in any::<u64>(),
        exponent in 0.01f64..0.99,
        supra in any::<bool>(),
        plain in any::<bool>(),
        x_half in prop::option::of(1.0f64..30.0),
    ) {
        let mut cfg = ExperimentConfig::reference(Mode::Compare);
        cfg.horizon = horizon;
        cfg.dt = horizon / 200.0;
        cfg.initial.radius = radius;
        cfg.seeds = seeds;
        cfg.master_seed = master;
        cfg.grid.x_half = x_half;
        if supra {
            cfg.scaling = ScalingMode::SupraLocal { exponent };
        }
        if plain {
            cfg.interaction = BumpProfile::Plain;
        }
        let text = cfg.to_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.horizon.to_bits(), cfg.horizon.to_bits());
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn slope_fit_recovers_power_laws(b in -2.0f64..0.5, a in 0.01f64..10.0) {
        let ns = [250, 500, 1000, 2000];
        let means: Vec<f64> = ns.iter().map(|&n| a * (n as f64).powf(b)).collect();
        let fit = fit_slope(&ns, &means, &[0.0; 4]).unwrap();
        prop_assert!((fit.slope - b).abs() < 1e-10);
        prop_assert!((fit.intercept - a.ln()).abs() < 1e-8);
    }
}

#[test]
fn compare_is_deterministic_and_worker_independent() {
    let mut cfg = small(Mode::Compare);
    cfg.workers = Some(1);
    let a = run_compare(&cfg).unwrap();
    let b = run_compare(&cfg).unwrap();
    assert_eq!(a, b);
    cfg.workers = Some(3);
    let c = run_compare(&cfg).unwrap();
    assert_eq!(a.records, c.records);
    assert_eq!(a.levels, c.levels);
}

#[test]
fn report_is_reproducible_from_the_csv() {
    let cfg = small(Mode::Compare);
    let dir = tempfile::tempdir().unwrap();
    execute(&cfg, dir.path()).unwrap();
    let (hash, rows) = read_functional_csv(fs::File::open(dir.path().join("distances.csv")).unwrap()).unwrap();
    assert_eq!(hash, cfg.hash());
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let report: ConvergenceReport = serde_json::from_value(raw["report"].clone()).unwrap();
    let records = ConvergenceReport::records_from_rows(&rows).unwrap();
    let rebuilt = ConvergenceReport::from_records(hash, report.horizon, report.pde_mass, records).unwrap();
    assert_eq!(rebuilt, report);
}

#[test]
fn free_comparison_gap_is_monte_carlo_noise() {
    // without interaction both sides are the free flow and the gap is the
    // sampling error of i.i.d. particles, decaying like N^{-1/2}
    let mut cfg = ExperimentConfig::reference(Mode::Compare);
    cfg.annihilation = false;
    cfg.seeds = 64;
    cfg.grid.nx = 256;
    cfg.grid.nv = 256;
    cfg.grid.dt = 0.125;
    cfg.dt = 0.05;
    let r = run_compare(&cfg).unwrap();
    let slope = r.slope.unwrap().slope;
    assert!((slope + 0.5).abs() <= 0.15, "slope {slope}");
}

#[test]
fn invalid_configs_are_rejected_at_load() {
    let good = small(Mode::Simulate).to_json().unwrap();
    assert!(ExperimentConfig::from_json(&good).is_ok());
    for (from, to) in [("\"horizon\": 1.0", "\"horizon\": -1.0"), ("\"dim\": 1", "\"dim\": 4"), ("\"seeds\": 3", "\"seeds\": 0")] {
        assert!(good.contains(from), "{from}");
        assert!(ExperimentConfig::from_json(&good.replace(from, to)).is_err(), "{to}");
    }
}

fn kinann(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kinann")).args(args).output().unwrap()
}

#[test]
fn cli_simulate_writes_hashed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, small(Mode::Simulate).to_json().unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = kinann(&["simulate", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "2", "--workers", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(written.seeds, 2);
    let hash = written.hash();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash.as_str());
    let events = fs::read_to_string(out.join("events.csv")).unwrap();
    assert_eq!(events.lines().next().unwrap(), "config_hash,seed,t,i,j");
    assert!(events.lines().skip(1).all(|l| l.starts_with(&hash)));
    let mass = fs::read_to_string(out.join("mass.csv")).unwrap();
    assert!(mass.lines().skip(1).all(|l| l.starts_with(&hash)));
    let snaps: Vec<_> = fs::read_dir(out.join("snapshots")).unwrap().collect();
    assert_eq!(snaps.len(), 4);
    let first = fs::read_to_string(snaps[0].as_ref().unwrap().path()).unwrap();
    assert_eq!(first.lines().next().unwrap(), "config_hash,seed,t,id,x1,v1");
}

#[test]
fn cli_solve_pde_writes_loadable_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, small(Mode::SolvePde).to_json().unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = kinann(&["solve-pde", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hash = ExperimentConfig::load(&out.join("config.json")).unwrap().hash();
    let (field, prov) = DensityField::load(&out.join("field_0001.bin")).unwrap();
    assert_eq!(prov.config_hash, hash);
    assert!((field.t - 1.0).abs() < 1e-12);
    assert!(out.join("mass.csv").exists());
}

#[test]
fn cli_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, "{\"mode\": \"compare\"}").unwrap();
    let o = kinann(&["compare", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}
