//! N-particle second-order dynamics with pairwise annihilation.
//!
//! Free motion is integrated exactly: over a step `dt` each coordinate
//! receives the joint Gaussian increment of `(∫ v dt, ΔB)` with covariance
//! `[[dt³/3, dt²/2], [dt²/2, dt]]`. Annihilation is Poisson thinning per
//! step: every alive unordered pair closer than ε becomes a candidate with
//! probability `1 - exp(-dt · 2θ^ε(r)/N)`; candidates are applied in the
//! order of a per-event uniform timestamp and events touching an
//! already-removed particle are dropped.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{epsilon_of, sample_initial, InitialDensity, Mollifier, PhasePoint, ScalingRule};
use crate::rng;

/// Largest spatial dimension supported by the cell grid.
pub const MAX_DIM: usize = 3;

/// Upper bound on `dt · sup θ · ε^{-d} / N`.
pub const RATE_GUARD: f64 = 0.2;
/// Above this value a warning is logged: thinning bias may show.
pub const RATE_SOFT_GUARD: f64 = 0.1;

type CellKey = [i64; MAX_DIM];

/// Uniform cell grid over alive particle positions with cell size ε.
#[derive(Debug, Clone)]
pub struct CellGrid {
    dim: usize,
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl CellGrid {
    /// Bin every alive particle. `positions` is the flat `n × dim` array.
    pub fn build(dim: usize, cell: f64, positions: &[f64], alive: &[bool]) -> Self {
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for (i, _) in alive.iter().enumerate().filter(|(_, &a)| a) {
            let x = &positions[i * dim..(i + 1) * dim];
            for a in 0..dim {
                lower[a] = lower[a].min(x[a]);
                upper[a] = upper[a].max(x[a]);
            }
            cells.entry(Self::key_of(dim, cell, x)).or_default().push(i);
        }
        Self {
            dim,
            cell,
            cells,
            lower,
            upper,
        }
    }

    fn key_of(dim: usize, cell: f64, x: &[f64]) -> CellKey {
        let mut k = [0i64; MAX_DIM];
        for a in 0..dim {
            k[a] = (x[a] / cell).floor() as i64;
        }
        k
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Axis-aligned bounding box of the binned particles.
    pub fn bounding_box(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// Number of binned particles.
    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell holding particle `i`, if binned.
    pub fn cell_of(&self, i: usize) -> Option<CellKey> {
        self.cells
            .iter()
            .find(|(_, members)| members.contains(&i))
            .map(|(k, _)| *k)
    }

    /// All unordered pairs `(i, j, |x_i - x_j|²)` with `i < j` and
    /// `|x_i - x_j| < radius`. Requires `radius ≤ cell size`. Output sorted.
    pub fn pairs_within(&self, positions: &[f64], radius: f64) -> Vec<(usize, usize, f64)> {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        let d = self.dim;
        let r2max = radius * radius;
        let offsets = neighbor_offsets(d);
        let mut out = Vec::new();
        for (key, members) in &self.cells {
            for off in &offsets {
                let mut nk = *key;
                for a in 0..d {
                    nk[a] += off[a];
                }
                let Some(others) = self.cells.get(&nk) else { continue };
                for &i in members {
                    let xi = &positions[i * d..(i + 1) * d];
                    for &j in others {
                        if j <= i {
                            continue;
                        }
                        let xj = &positions[j * d..(j + 1) * d];
                        let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                        if r2 < r2max {
                            out.push((i, j, r2));
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(i, j, _)| (i, j));
        out
    }
}

fn neighbor_offsets(dim: usize) -> Vec<CellKey> {
    let mut out = vec![[0i64; MAX_DIM]];
    for a in 0..dim {
        let mut next = Vec::with_capacity(out.len() * 3);
        for base in &out {
            for delta in -1..=1 {
                let mut k = *base;
                k[a] = delta;
                next.push(k);
            }
        }
        out = next;
    }
    out
}

/// O(N²) reference enumeration of interacting pairs.
pub fn brute_force_pairs(dim: usize, positions: &[f64], alive: &[bool], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let r2max = radius * radius;
    for i in 0..alive.len() {
        if !alive[i] {
            continue;
        }
        for j in i + 1..alive.len() {
            if !alive[j] {
                continue;
            }
            let r2: f64 = (0..dim)
                .map(|a| positions[i * dim + a] - positions[j * dim + a])
                .map(|c| c * c)
                .sum();
            if r2 < r2max {
                out.push((i, j, r2));
            }
        }
    }
    out
}

/// One logged annihilation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub i: usize,
    pub j: usize,
}

/// Full state of an N-particle run.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    dim: usize,
    n0: usize,
    x: Vec<f64>,
    v: Vec<f64>,
    alive: Vec<bool>,
    n_alive: usize,
    eps: f64,
    time: f64,
    step: u64,
    seed: u64,
    theta: Mollifier,
    streams: Vec<ChaCha8Rng>,
    events: Vec<Event>,
}

impl ParticleSystem {
    /// Place particles at the given initial conditions.
    pub fn new(initial: &[PhasePoint], theta: Mollifier, eps: f64, seed: u64) -> Result<Self> {
        let n0 = initial.len();
        if n0 == 0 {
            return Err(invalid("initial", "at least one particle is required"));
        }
        let dim = theta.dim();
        if dim > MAX_DIM {
            return Err(invalid("dim", format!("particle simulation supports d ≤ {MAX_DIM}")));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(invalid("eps", format!("must lie in (0, 1], got {eps}")));
        }
        let mut x = Vec::with_capacity(n0 * dim);
        let mut v = Vec::with_capacity(n0 * dim);
        for p in initial {
            if p.x.len() != dim || p.v.len() != dim {
                return Err(invalid("initial", "phase point dimension does not match the mollifier"));
            }
            x.extend_from_slice(&p.x);
            v.extend_from_slice(&p.v);
        }
        Ok(Self {
            dim,
            n0,
            x,
            v,
            alive: vec![true; n0],
            n_alive: n0,
            eps,
            time: 0.0,
            step: 0,
            seed,
            theta,
            streams: (0..n0).map(|i| rng::particle_stream(seed, i)).collect(),
            events: Vec::new(),
        })
    }

    /// Sample `n` particles from f0 and set ε by the scaling rule.
    pub fn from_initial_density(f0: &InitialDensity, n: usize, rule: &ScalingRule, seed: u64) -> Result<Self> {
        if rule.dim != f0.dim() {
            return Err(invalid("rule", "scaling rule and f0 disagree on the dimension"));
        }
        let eps = epsilon_of(rule, n)?;
        let theta = Mollifier::interaction(f0.dim())?;
        let initial = sample_initial(f0, n, seed)?;
        Self::new(&initial, theta, eps, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n0(&self) -> usize {
        self.n0
    }
    pub fn n_alive(&self) -> usize {
        self.n_alive
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn theta(&self) -> &Mollifier {
        &self.theta
    }
    pub fn events(&self) -> &[Event] {
        &self.events
    }
    pub fn is_alive(&self, i: usize) -> bool {
        self.alive[i]
    }
    pub fn alive_flags(&self) -> &[bool] {
        &self.alive
    }
    pub fn positions(&self) -> &[f64] {
        &self.x
    }
    pub fn velocities(&self) -> &[f64] {
        &self.v
    }
    pub fn position(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest per-pair jump rate `2 sup θ^ε / N`.
    pub fn max_pair_rate(&self) -> f64 {
        2.0 * self.theta.sup() * self.eps.powi(-(self.dim as i32)) / self.n0 as f64
    }

    /// Exact Gaussian free motion over `dt` for every alive particle.
    pub fn free_step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        let sd_v = dt.sqrt();
        let sd_x = dt * sd_v;
        let c_indep = 0.5 / 3f64.sqrt();
        let d = self.dim;
        for i in 0..self.n0 {
            if !self.alive[i] {
                continue;
            }
            let stream = &mut self.streams[i];
            for a in 0..d {
                let z1: f64 = stream.sample(StandardNormal);
                let z2: f64 = stream.sample(StandardNormal);
                let k = i * d + a;
                self.x[k] += self.v[k] * dt + sd_x * (0.5 * z1 + c_indep * z2);
                self.v[k] += sd_v * z1;
            }
        }
        self.advance_clock(dt);
        Ok(())
    }

    /// Move the clock without moving particles (frozen-motion experiments).
    pub fn advance_clock(&mut self, dt: f64) {
        self.step += 1;
        self.time += dt;
    }

    /// Build the neighbor grid over current alive positions.
    pub fn cell_grid(&self) -> CellGrid {
        CellGrid::build(self.dim, self.eps, &self.x, &self.alive)
    }

    /// Annihilation draws over `[t, t + dt)` with the current positions.
    /// Returns the number of applied events. Does not advance the clock.
    pub fn annihilation_step(&mut self, dt: f64) -> Result<usize> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if self.n_alive < 2 {
            return Ok(0);
        }
        let grid = self.cell_grid();
        let pairs = grid.pairs_within(&self.x, self.eps);
        let inv_n = 1.0 / self.n0 as f64;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, j, r2) in pairs {
            let rate = 2.0 * self.theta.scaled_sq(self.eps, r2) * inv_n;
            if rate <= 0.0 {
                continue;
            }
            let p = -(-dt * rate).exp_m1();
            let (u, stamp) = rng::pair_uniforms(self.seed, self.step, i, j);
            if u < p {
                candidates.push((stamp, i, j));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut applied = 0;
        for (stamp, i, j) in candidates {
            if self.alive[i] && self.alive[j] {
                self.alive[i] = false;
                self.alive[j] = false;
                self.n_alive -= 2;
                self.events.push(Event {
                    t: self.time + stamp * dt,
                    i,
                    j,
                });
                applied += 1;
            }
        }
        Ok(applied)
    }

    pub fn snapshot(&self) -> Snapshot {
        let d = self.dim;
        let mut ids = Vec::with_capacity(self.n_alive);
        let mut x = Vec::with_capacity(self.n_alive * d);
        let mut v = Vec::with_capacity(self.n_alive * d);
        for i in (0..self.n0).filter(|&i| self.alive[i]) {
            ids.push(i);
            x.extend_from_slice(self.position(i));
            v.extend_from_slice(self.velocity(i));
        }
        Snapshot {
            t: self.time,
            ids,
            x,
            v,
        }
    }
}

/// Which step boundaries are recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    /// Every step boundary, including t = 0 and t = T.
    EveryStep,
    /// Every k-th step boundary, plus t = T.
    Stride(usize),
    /// The step boundaries nearest to the listed times.
    Times(Vec<f64>),
    /// Only t = 0 and t = T.
    Endpoints,
}

/// Time stepping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub dt: f64,
    pub observe: Observation,
    /// Run annihilation draws (off reproduces the free system).
    #[serde(default = "default_true")]
    pub annihilation: bool,
    /// Skip free motion; used for frozen-configuration experiments.
    #[serde(default)]
    pub freeze_motion: bool,
}

fn default_true() -> bool {
    true
}

impl StepPlan {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            observe: Observation::Endpoints,
            annihilation: true,
            freeze_motion: false,
        }
    }

    pub fn observe(mut self, observe: Observation) -> Self {
        self.observe = observe;
        self
    }

    pub fn without_annihilation(mut self) -> Self {
        self.annihilation = false;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.freeze_motion = true;
        self
    }

    /// Check `dt` and the rate-resolution guard for `sys`.
    pub fn validate(&self, sys: &ParticleSystem) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        let load = self.dt * sys.max_pair_rate() / 2.0;
        if self.annihilation && load > RATE_GUARD {
            return Err(invalid(
                "dt",
                format!("dt·supθ·ε^-d/N = {load:.3} exceeds the rate guard {RATE_GUARD}"),
            ));
        }
        if self.annihilation && load > RATE_SOFT_GUARD {
            log::warn!("dt·supθ·ε^-d/N = {load:.3}; thinning bias may be visible");
        }
        if let Observation::Stride(0) = self.observe {
            return Err(invalid("observe", "stride must be positive"));
        }
        Ok(())
    }
}

/// Alive particles at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub ids: Vec<usize>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Recorded output of [`run`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dim: usize,
    pub n0: usize,
    pub eps: f64,
    pub dt: f64,
    pub seed: u64,
    /// Interaction kernel in force; `None` when annihilation was disabled.
    pub theta: Option<Mollifier>,
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    /// Exact bookkeeping: event count ≤ N/2, no particle dies twice, alive
    /// counts nonincreasing and equal to `N(0) - 2·#events` before each
    /// snapshot, and dead particles absent from later snapshots.
    pub fn check_bookkeeping(&self) -> Result<()> {
        if 2 * self.events.len() > self.n0 {
            return Err(Error::Invariant(format!(
                "{} events exceed N/2 = {}",
                self.events.len(),
                self.n0 / 2
            )));
        }
        let mut death = vec![f64::INFINITY; self.n0];
        for e in &self.events {
            if e.i == e.j || e.i >= self.n0 || e.j >= self.n0 {
                return Err(Error::Invariant(format!("malformed event {e:?}")));
            }
            for k in [e.i, e.j] {
                if death[k].is_finite() {
                    return Err(Error::Invariant(format!("particle {k} annihilated twice")));
                }
                death[k] = e.t;
            }
        }
        let mut prev = usize::MAX;
        for s in &self.snapshots {
            let n = s.len();
            if n > prev {
                return Err(Error::Invariant(format!("alive count increased at t = {}", s.t)));
            }
            if (self.n0 - n) % 2 != 0 {
                return Err(Error::Invariant(format!("parity broken at t = {}", s.t)));
            }
            let before = self.events.iter().filter(|e| e.t <= s.t).count();
            if n != self.n0 - 2 * before {
                return Err(Error::Invariant(format!(
                    "alive count {n} at t = {} disagrees with {before} logged events",
                    s.t
                )));
            }
            if let Some(&dead) = s.ids.iter().find(|&&i| death[i] <= s.t) {
                return Err(Error::Invariant(format!("dead particle {dead} present at t = {}", s.t)));
            }
            prev = n;
        }
        Ok(())
    }
}

pub(crate) fn observed_steps(observe: &Observation, n_steps: usize, dt: f64) -> Vec<bool> {
    let mut mask = vec![false; n_steps + 1];
    match observe {
        Observation::EveryStep => mask.iter_mut().for_each(|m| *m = true),
        Observation::Stride(k) => {
            for s in (0..=n_steps).step_by(*k) {
                mask[s] = true;
            }
        }
        Observation::Times(ts) => {
            for &t in ts {
                let s = ((t / dt).round().max(0.0) as usize).min(n_steps);
                mask[s] = true;
            }
        }
        Observation::Endpoints => mask[0] = true,
    }
    mask[n_steps] = true;
    mask
}

/// Alternate annihilation and free motion until `horizon`.
pub fn run(sys: &mut ParticleSystem, horizon: f64, plan: &StepPlan) -> Result<Trajectory> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("T", format!("must be positive, got {horizon}")));
    }
    plan.validate(sys)?;
    let start = sys.time;
    let n_steps = ((horizon / plan.dt) - 1e-9).ceil().max(1.0) as usize;
    let mask = observed_steps(&plan.observe, n_steps, plan.dt);
    let mut snapshots = Vec::new();
    for s in 0..n_steps {
        if mask[s] {
            snapshots.push(sys.snapshot());
        }
        let t_next = if s + 1 == n_steps {
            horizon
        } else {
            (s + 1) as f64 * plan.dt
        };
        let h = start + t_next - sys.time;
        if plan.annihilation {
            sys.annihilation_step(h)?;
        }
        if plan.freeze_motion {
            sys.advance_clock(h);
        } else {
            sys.free_step(h)?;
        }
        sys.time = start + t_next;
    }
    snapshots.push(sys.snapshot());
    Ok(Trajectory {
        dim: sys.dim,
        n0: sys.n0,
        eps: sys.eps,
        dt: plan.dt,
        seed: sys.seed,
        theta: plan.annihilation.then(|| sys.theta.clone()),
        snapshots,
        events: sys.events.clone(),
    })
}

/// The non-interacting system from the same initial data and Brownian streams.
pub fn free_system_run(
    f0: &InitialDensity,
    n: usize,
    rule: &ScalingRule,
    horizon: f64,
    seed: u64,
    plan: &StepPlan,
) -> Result<Trajectory> {
    let mut sys = ParticleSystem::from_initial_density(f0, n, rule, seed)?;
    let plan = plan.clone().without_annihilation();
    run(&mut sys, horizon, &plan)
}

/// Snapshot rows `(config_hash, seed, t, id, x…, v…)`.
pub fn write_snapshots_csv<W: std::io::Write>(w: W, traj: &Trajectory, config_hash: &str) -> Result<()> {
    let d = traj.dim;
    let mut wtr = csv::Writer::from_writer(w);
    let mut head: Vec<String> = ["config_hash", "seed", "t", "id"].iter().map(|s| s.to_string()).collect();
    head.extend((1..=d).map(|a| format!("x{a}")));
    head.extend((1..=d).map(|a| format!("v{a}")));
    wtr.write_record(&head)?;
    for s in &traj.snapshots {
        for (k, &id) in s.ids.iter().enumerate() {
            let mut rec = vec![config_hash.to_string(), traj.seed.to_string(), s.t.to_string(), id.to_string()];
            rec.extend(s.x[k * d..(k + 1) * d].iter().map(f64::to_string));
            rec.extend(s.v[k * d..(k + 1) * d].iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Event rows `(config_hash, seed, t, i, j)`; the header is written when `header` is set.
pub fn write_events_csv<W: std::io::Write>(w: W, traj: &Trajectory, config_hash: &str, header: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if header {
        wtr.write_record(["config_hash", "seed", "t", "i", "j"])?;
    }
    for e in &traj.events {
        wtr.write_record([
            config_hash.to_string(),
            traj.seed.to_string(),
            e.t.to_string(),
            e.i.to_string(),
            e.j.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhasePoint;

    fn pp(x: f64, v: f64) -> PhasePoint {
        PhasePoint { x: vec![x], v: vec![v] }
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let theta = Mollifier::interaction(1).unwrap();
        let mut sys = ParticleSystem::new(&[pp(0.0, 0.0)], theta, 0.5, 1).unwrap();
        assert!(sys.free_step(0.0).is_err());
        assert!(sys.free_step(-1.0).is_err());
        assert!(sys.annihilation_step(0.0).is_err());
    }

    #[test]
    fn single_particle_annihilation_is_noop() {
        let theta = Mollifier::interaction(1).unwrap();
        let mut sys = ParticleSystem::new(&[pp(0.1, 0.2)], theta, 0.5, 1).unwrap();
        assert_eq!(sys.annihilation_step(0.1).unwrap(), 0);
        assert_eq!(sys.n_alive(), 1);
        assert_eq!(sys.position(0), &[0.1]);
    }

    #[test]
    fn far_pairs_never_annihilate() {
        let theta = Mollifier::interaction(1).unwrap();
        let mut sys = ParticleSystem::new(&[pp(0.0, 0.0), pp(0.5, 0.0)], theta, 0.5, 3).unwrap();
        for _ in 0..10_000 {
            sys.annihilation_step(0.1).unwrap();
            sys.advance_clock(0.1);
        }
        assert_eq!(sys.n_alive(), 2);
    }

    #[test]
    fn dead_particles_do_not_move() {
        let theta = Mollifier::interaction(1).unwrap();
        // distance 0.3 inside eps = 1: rate is high
        let mut sys = ParticleSystem::new(&[pp(0.0, 1.0), pp(0.3, -1.0), pp(5.0, 0.0)], theta, 1.0, 5).unwrap();
        while sys.n_alive() == 3 {
            sys.annihilation_step(0.05).unwrap();
            sys.advance_clock(0.05);
        }
        let frozen = (sys.position(0).to_vec(), sys.velocity(0).to_vec());
        sys.free_step(0.1).unwrap();
        assert_eq!((sys.position(0).to_vec(), sys.velocity(0).to_vec()), frozen);
        assert_eq!(sys.events().len(), 1);
    }

    #[test]
    fn tiny_dt_barely_moves() {
        let theta = Mollifier::interaction(1).unwrap();
        let init: Vec<_> = (0..1000).map(|i| pp(i as f64, 0.0)).collect();
        let mut sys = ParticleSystem::new(&init, theta, 0.001, 8).unwrap();
        sys.free_step(1e-12).unwrap();
        for i in 0..1000 {
            assert!((sys.position(i)[0] - i as f64).abs() < 1e-4);
            assert!(sys.velocity(i)[0].abs() < 1e-4);
        }
    }

    #[test]
    fn grid_matches_brute_force_2d() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = 200;
            let pos: Vec<f64> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
            let alive: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
            let eps = 0.1;
            let grid = CellGrid::build(2, eps, &pos, &alive);
            assert_eq!(grid.len(), alive.iter().filter(|&&a| a).count());
            let mut a = grid.pairs_within(&pos, eps);
            let mut b = brute_force_pairs(2, &pos, &alive, eps);
            a.sort_by_key(|p| (p.0, p.1));
            b.sort_by_key(|p| (p.0, p.1));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plan_guard() {
        let theta = Mollifier::interaction(1).unwrap();
        let init: Vec<_> = (0..100).map(|i| pp(i as f64 * 0.01, 0.0)).collect();
        let sys = ParticleSystem::new(&init, theta, 0.01, 8).unwrap();
        assert!(StepPlan::new(1.0).validate(&sys).is_err());
        assert!(StepPlan::new(0.01).validate(&sys).is_ok());
        assert!(StepPlan::new(1.0).without_annihilation().validate(&sys).is_ok());
    }

    #[test]
    fn observation_masks() {
        let m = observed_steps(&Observation::Stride(3), 7, 0.1);
        assert_eq!(m, vec![true, false, false, true, false, false, true, true]);
        let m = observed_steps(&Observation::Times(vec![0.2, 0.5]), 5, 0.1);
        assert_eq!(m, vec![false, false, true, false, false, true]);
    }
}
