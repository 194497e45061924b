//! Grid solver for `∂_t f = -v·∇_x f + ½Δ_v f - 2 f ρ_f`, `ρ_f(x) = ∫ f dv`.
//!
//! Phase space is truncated to a box: periodic in x, absorbing in v with
//! the absorbed mass tracked. Nodes sit at `(i - n/2) h` so that `v = 0` is
//! a node; values are stored row-major over `(x_1, …, x_d, v_1, …, v_d)`
//! with the velocity block contiguous.
//!
//! One step is the symmetric composition
//! `R(dt/2) D(dt/2) T(dt) D(dt/2) R(dt/2)` of an exact reaction substep,
//! a sampled heat-kernel convolution in v and a linear-interpolation shift
//! in x.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::empirical::{Pairable, TestFunction};
use crate::error::{invalid, Error, Result};
use crate::model::InitialDensity;
use crate::particle_sim::{observed_steps, Observation};

/// Phase-space box and its lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub dim: usize,
    pub nx: usize,
    pub nv: usize,
    pub hx: f64,
    pub hv: f64,
}

impl PhaseGrid {
    /// `nx` nodes per x axis spanning `[-x_half, x_half)`, likewise in v.
    pub fn new(dim: usize, nx: usize, nv: usize, x_half: f64, v_half: f64) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(invalid("dim", "grid supports 1 ≤ d ≤ 3"));
        }
        if nx < 2 || nv < 3 {
            return Err(invalid("nodes", "need nx ≥ 2 and nv ≥ 3"));
        }
        if !(x_half > 0.0 && v_half > 0.0 && x_half.is_finite() && v_half.is_finite()) {
            return Err(invalid("half_width", "box half-widths must be positive"));
        }
        let total = (nx as u128 * nv as u128).pow(dim as u32);
        if total > 1 << 31 {
            return Err(invalid("nodes", format!("{total} nodes exceed the supported size")));
        }
        Ok(Self {
            dim,
            nx,
            nv,
            hx: 2.0 * x_half / nx as f64,
            hv: 2.0 * v_half / nv as f64,
        })
    }

    /// Box sized for data supported in the radius-`radius` ball up to time
    /// `horizon`: x half-width `R + RT + 6T^{3/2}`, v half-width `R + 5.5√T`.
    pub fn for_horizon(dim: usize, nx: usize, nv: usize, radius: f64, horizon: f64) -> Result<Self> {
        let (xh, vh) = Self::default_half_widths(radius, horizon);
        Self::new(dim, nx, nv, xh, vh)
    }

    pub fn default_half_widths(radius: f64, horizon: f64) -> (f64, f64) {
        (
            radius + radius * horizon + 6.0 * horizon.powf(1.5),
            radius + 5.5 * horizon.sqrt(),
        )
    }

    pub fn x_half(&self) -> f64 {
        0.5 * self.nx as f64 * self.hx
    }

    pub fn v_half(&self) -> f64 {
        0.5 * self.nv as f64 * self.hv
    }

    pub fn x_nodes(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn v_nodes(&self) -> usize {
        self.nv.pow(self.dim as u32)
    }

    pub fn len(&self) -> usize {
        self.x_nodes() * self.v_nodes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Phase-space cell volume `(h_x h_v)^d`.
    pub fn cell_volume(&self) -> f64 {
        (self.hx * self.hv).powi(self.dim as i32)
    }

    pub fn x_coord(&self, i: usize) -> f64 {
        (i as f64 - (self.nx / 2) as f64) * self.hx
    }

    pub fn v_coord(&self, j: usize) -> f64 {
        (j as f64 - (self.nv / 2) as f64) * self.hv
    }

    /// Coordinates of x-row `row` into `out`.
    pub fn x_point(&self, mut row: usize, out: &mut [f64]) {
        for a in (0..self.dim).rev() {
            out[a] = self.x_coord(row % self.nx);
            row /= self.nx;
        }
    }

    /// Coordinates of velocity node `col` into `out`.
    pub fn v_point(&self, mut col: usize, out: &mut [f64]) {
        for a in (0..self.dim).rev() {
            out[a] = self.v_coord(col % self.nv);
            col /= self.nv;
        }
    }

    /// Trapezoid weight of velocity node `col` (endpoint halving per axis).
    fn v_weight(&self, mut col: usize) -> f64 {
        let mut w = self.hv.powi(self.dim as i32);
        for _ in 0..self.dim {
            let j = col % self.nv;
            if j == 0 || j + 1 == self.nv {
                w *= 0.5;
            }
            col /= self.nv;
        }
        w
    }
}

/// Cumulative mass bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLedger {
    pub initial: f64,
    pub reaction_loss: f64,
    pub leakage: f64,
}

impl MassLedger {
    /// initial - reaction loss - leakage.
    pub fn expected_mass(&self) -> f64 {
        self.initial - self.reaction_loss - self.leakage
    }
}

/// Discretized density at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: PhaseGrid,
    pub t: f64,
    pub values: Vec<f64>,
    pub ledger: MassLedger,
}

impl DensityField {
    pub fn zeros(grid: PhaseGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            t: 0.0,
            values: vec![0.0; n],
            ledger: MassLedger::default(),
        }
    }

    /// Nodal samples of `f(x, v)`.
    pub fn from_fn<F: Fn(&[f64], &[f64]) -> f64 + Sync>(grid: PhaseGrid, f: F) -> Result<Self> {
        let nv = grid.v_nodes();
        let d = grid.dim;
        let mut values = vec![0.0; grid.len()];
        values.par_chunks_mut(nv).enumerate().for_each(|(row, out)| {
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            grid.x_point(row, &mut x[..d]);
            for (col, o) in out.iter_mut().enumerate() {
                grid.v_point(col, &mut v[..d]);
                *o = f(&x[..d], &v[..d]);
            }
        });
        Self::from_values(grid, 0.0, values)
    }

    /// Cell averages of f0 by `s^{2d}` midpoint subsamples per cell.
    pub fn from_initial(grid: PhaseGrid, f0: &InitialDensity, supersample: usize) -> Result<Self> {
        if f0.dim() != grid.dim {
            return Err(invalid("f0", "dimension mismatch with grid"));
        }
        let s = supersample.max(1);
        let d = grid.dim;
        let (hx, hv) = (grid.hx, grid.hv);
        let offsets: Vec<f64> = (0..s).map(|k| (k as f64 + 0.5) / s as f64 - 0.5).collect();
        let per_cell = s.pow(2 * d as u32);
        Self::from_fn(grid, |x, v| {
            let mut acc = 0.0;
            for m in 0..per_cell {
                let mut rem = m;
                let mut r2 = 0.0;
                for a in 0..2 * d {
                    let o = offsets[rem % s];
                    rem /= s;
                    let c = if a < d { x[a] + o * hx } else { v[a - d] + o * hv };
                    r2 += c * c;
                }
                acc += f0.eval_sq(r2);
            }
            acc / per_cell as f64
        })
    }

    pub fn from_values(grid: PhaseGrid, t: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid("values", format!("expected {} values, got {}", grid.len(), values.len())));
        }
        if let Some(bad) = values.iter().find(|f| !(**f >= 0.0 && f.is_finite())) {
            return Err(invalid("values", format!("density must be finite and nonnegative, found {bad}")));
        }
        let mut field = Self {
            grid,
            t,
            values,
            ledger: MassLedger::default(),
        };
        field.ledger.initial = field.mass();
        Ok(field)
    }

    /// Riemann sum ∫∫ f.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// ρ(x) = ∫ f dv at every x-row, by the trapezoid rule.
    pub fn rho(&self) -> Vec<f64> {
        let nv = self.grid.v_nodes();
        let weights: Vec<f64> = (0..nv).map(|c| self.grid.v_weight(c)).collect();
        self.values
            .par_chunks(nv)
            .map(|row| row.iter().zip(&weights).map(|(f, w)| f * w).sum())
            .collect()
    }

    pub fn sup_rho(&self) -> f64 {
        self.rho().into_iter().fold(0.0, f64::max)
    }

    /// Σ |f - g| h^{2d}.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        if self.grid != other.grid {
            return Err(invalid("grid", "fields live on different grids"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume())
    }

    /// Mass ledger mismatch |mass - (initial - losses)|.
    pub fn ledger_defect(&self) -> f64 {
        (self.mass() - self.ledger.expected_mass()).abs()
    }

    fn header(&self, provenance: &Provenance) -> FieldHeader {
        FieldHeader {
            format: FIELD_FORMAT.to_string(),
            grid: self.grid.clone(),
            t: self.t,
            mass: self.mass(),
            ledger: self.ledger,
            len: self.values.len(),
            provenance: provenance.clone(),
        }
    }

    /// One JSON header line, then the values as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W, provenance: &Provenance) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header(provenance))?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for f in &self.values {
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<(Self, Provenance)> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FieldHeader = serde_json::from_str(line.trim_end())?;
        if header.format != FIELD_FORMAT {
            return Err(invalid("format", format!("unknown field format {}", header.format)));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * header.len {
            return Err(invalid("values", format!("expected {} bytes, got {}", 8 * header.len, bytes.len())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut field = Self::from_values(header.grid, header.t, values)?;
        field.ledger = header.ledger;
        Ok((field, header.provenance))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f), provenance)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Σ_{nodes} φ(t, x, v) f h^{2d}.
    pub fn pair(&self, phi: &dyn TestFunction, t: f64) -> f64 {
        self.weighted_sum(|x, v, f| phi.value(t, x, v) * f)
    }

    fn weighted_sum<G: Fn(&[f64], &[f64], f64) -> f64 + Sync>(&self, g: G) -> f64 {
        let grid = &self.grid;
        let d = grid.dim;
        let nv = grid.v_nodes();
        let total: f64 = self
            .values
            .par_chunks(nv)
            .enumerate()
            .map(|(row, vals)| {
                let mut x = [0.0; 3];
                let mut v = [0.0; 3];
                grid.x_point(row, &mut x[..d]);
                let mut acc = 0.0;
                for (col, &f) in vals.iter().enumerate() {
                    if f != 0.0 {
                        grid.v_point(col, &mut v[..d]);
                        acc += g(&x[..d], &v[..d], f);
                    }
                }
                acc
            })
            .sum();
        total * grid.cell_volume()
    }
}

impl Pairable for DensityField {
    fn pair_with(&self, phi: &dyn TestFunction, t: f64) -> f64 {
        self.pair(phi, t)
    }
}

const FIELD_FORMAT: &str = "density-field-v1";

/// Identifies the run that produced an artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    format: String,
    grid: PhaseGrid,
    t: f64,
    mass: f64,
    ledger: MassLedger,
    len: usize,
    provenance: Provenance,
}

/// Free transport `f(x, v) ← f(x - v dt, v)`, periodic in x, linear
/// interpolation between x nodes.
pub fn transport_step(f: &mut DensityField, dt: f64) -> Result<()> {
    check_dt(dt)?;
    let grid = f.grid.clone();
    let d = grid.dim;
    let (nx, nvb) = (grid.nx, grid.v_nodes());
    for axis in 0..d {
        let x_stride = nx.pow((d - 1 - axis) as u32);
        let v_stride = grid.nv.pow((d - 1 - axis) as u32);
        // shift per velocity column: v dt / h = m + α
        let shifts: Vec<(usize, f64)> = (0..nvb)
            .map(|col| {
                let vj = grid.v_coord((col / v_stride) % grid.nv);
                let s = vj * dt / grid.hx;
                let m = s.floor();
                let alpha = s - m;
                (m.rem_euclid(nx as f64) as usize % nx, alpha)
            })
            .collect();
        let src = std::mem::take(&mut f.values);
        let mut out = vec![0.0; src.len()];
        out.par_chunks_mut(nvb).enumerate().for_each(|(row, dst)| {
            let i = (row / x_stride) % nx;
            let base = row - i * x_stride;
            for (col, o) in dst.iter_mut().enumerate() {
                let (m, alpha) = shifts[col];
                let i0 = (i + nx - m) % nx;
                let i1 = (i0 + nx - 1) % nx;
                let a = src[(base + i0 * x_stride) * nvb + col];
                *o = if alpha == 0.0 {
                    a
                } else {
                    (1.0 - alpha) * a + alpha * src[(base + i1 * x_stride) * nvb + col]
                };
            }
        });
        f.values = out;
    }
    f.t += dt;
    Ok(())
}

/// Normalized samples of the N(0, var) density on the v lattice, cut at 6σ.
pub fn heat_kernel_weights(var: f64, hv: f64) -> Vec<f64> {
    let sigma = var.sqrt();
    let half = ((6.0 * sigma) / hv).floor() as usize;
    let mut w: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let z = (k as f64 - half as f64) * hv;
            (-0.5 * z * z / var).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|c| *c /= s);
    w
}

/// Heat flow `∂_t f = ½Δ_v f` over `dt`: convolution in each velocity axis
/// with the sampled Gaussian of variance `dt`. Mass carried past the v box
/// is added to the ledger's leakage.
pub fn diffusion_step(f: &mut DensityField, dt: f64) -> Result<()> {
    check_dt(dt)?;
    let grid = f.grid.clone();
    if dt.sqrt() < grid.hv {
        log::warn!("heat kernel under-resolved: √dt = {:.3e} < h_v = {:.3e}", dt.sqrt(), grid.hv);
    }
    let w = heat_kernel_weights(dt, grid.hv);
    let half = (w.len() / 2) as isize;
    let d = grid.dim;
    let nv = grid.nv;
    let nvb = grid.v_nodes();
    let cell = grid.cell_volume();
    let mut leaked = 0.0;
    for axis in 0..d {
        let stride = nv.pow((d - 1 - axis) as u32);
        let lost: f64 = f
            .values
            .par_chunks_mut(nvb)
            .map(|block| {
                let src = block.to_vec();
                block.iter_mut().for_each(|c| *c = 0.0);
                let mut lost = 0.0;
                for (col, &val) in src.iter().enumerate() {
                    if val == 0.0 {
                        continue;
                    }
                    let j = ((col / stride) % nv) as isize;
                    let base = col - (j as usize) * stride;
                    for (k, &wk) in w.iter().enumerate() {
                        let target = j + k as isize - half;
                        if target < 0 || target >= nv as isize {
                            lost += wk * val;
                        } else {
                            block[base + target as usize * stride] += wk * val;
                        }
                    }
                }
                lost
            })
            .sum();
        leaked += lost * cell;
    }
    f.ledger.leakage += leaked;
    f.t += dt;
    Ok(())
}

/// Exact solution of `∂_t f = -2ρ f`, `∂_t ρ = -2ρ²` over `dt` at every x
/// node: `f ← f / (1 + 2ρ dt)`.
pub fn reaction_step(f: &mut DensityField, dt: f64) -> Result<()> {
    check_dt(dt)?;
    let rho = f.rho();
    let nvb = f.grid.v_nodes();
    let before = f.mass();
    f.values.par_chunks_mut(nvb).zip(rho.par_iter()).for_each(|(row, &r)| {
        if r > 0.0 {
            let s = 1.0 / (1.0 + 2.0 * r * dt);
            row.iter_mut().for_each(|c| *c *= s);
        }
    });
    f.ledger.reaction_loss += before - f.mass();
    f.t += dt;
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(invalid("dt", format!("must be positive, got {dt}")))
    }
}

/// Options for [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub dt: f64,
    /// Apply the `-2fρ` sink; off gives the free Fokker–Planck flow.
    #[serde(default = "default_true")]
    pub sink: bool,
    pub observe: Observation,
    /// Abort when cumulative v-boundary leakage exceeds this.
    #[serde(default = "default_leakage_guard")]
    pub leakage_guard: f64,
}

fn default_true() -> bool {
    true
}

fn default_leakage_guard() -> f64 {
    1e-6
}

impl SolveOptions {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            sink: true,
            observe: Observation::Endpoints,
            leakage_guard: default_leakage_guard(),
        }
    }

    pub fn without_sink(mut self) -> Self {
        self.sink = false;
        self
    }

    pub fn observe(mut self, observe: Observation) -> Self {
        self.observe = observe;
        self
    }
}

/// Mass curve entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassRecord {
    pub t: f64,
    pub mass: f64,
    pub reaction_loss: f64,
    pub leakage: f64,
    pub sup_rho: f64,
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct PdeTrajectory {
    pub options: SolveOptions,
    pub snapshots: Vec<DensityField>,
    /// One entry per step boundary.
    pub mass_curve: Vec<MassRecord>,
    /// Largest per-step ledger mismatch.
    pub max_ledger_defect: f64,
}

impl PdeTrajectory {
    pub fn last(&self) -> &DensityField {
        self.snapshots.last().expect("solve always records the final state")
    }

    /// sup over recorded steps of sup_x ρ.
    pub fn sup_rho(&self) -> f64 {
        self.mass_curve.iter().map(|m| m.sup_rho).fold(0.0, f64::max)
    }
}

/// One symmetric splitting step.
pub fn strang_step(f: &mut DensityField, dt: f64, sink: bool) -> Result<()> {
    let t0 = f.t;
    if sink {
        reaction_step(f, 0.5 * dt)?;
    }
    diffusion_step(f, 0.5 * dt)?;
    transport_step(f, dt)?;
    diffusion_step(f, 0.5 * dt)?;
    if sink {
        reaction_step(f, 0.5 * dt)?;
    }
    f.t = t0 + dt;
    Ok(())
}

/// Integrate from `f0` to time `horizon`.
pub fn solve(f0: &DensityField, horizon: f64, options: &SolveOptions) -> Result<PdeTrajectory> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("T", format!("must be positive, got {horizon}")));
    }
    check_dt(options.dt)?;
    if let Observation::Stride(0) = options.observe {
        return Err(invalid("observe", "stride must be positive"));
    }
    let n_steps = ((horizon / options.dt) - 1e-9).ceil().max(1.0) as usize;
    let mask = observed_steps(&options.observe, n_steps, options.dt);
    let start = f0.t;
    let mut f = f0.clone();
    let mut snapshots = Vec::new();
    let mut mass_curve = Vec::with_capacity(n_steps + 1);
    let mut max_defect: f64 = 0.0;
    let record = |f: &DensityField| MassRecord {
        t: f.t,
        mass: f.mass(),
        reaction_loss: f.ledger.reaction_loss,
        leakage: f.ledger.leakage,
        sup_rho: f.sup_rho(),
    };
    for s in 0..n_steps {
        if mask[s] {
            snapshots.push(f.clone());
        }
        mass_curve.push(record(&f));
        let t_next = if s + 1 == n_steps {
            start + horizon
        } else {
            start + (s + 1) as f64 * options.dt
        };
        let before = f.mass() + f.ledger.reaction_loss + f.ledger.leakage;
        let h = t_next - f.t;
        strang_step(&mut f, h, options.sink)?;
        f.t = t_next;
        let after = f.mass() + f.ledger.reaction_loss + f.ledger.leakage;
        max_defect = max_defect.max((after - before).abs());
        if f.ledger.leakage > options.leakage_guard {
            return Err(Error::Leakage {
                leakage: f.ledger.leakage,
                guard: options.leakage_guard,
                time: f.t,
            });
        }
    }
    mass_curve.push(record(&f));
    snapshots.push(f);
    Ok(PdeTrajectory {
        options: options.clone(),
        snapshots,
        mass_curve,
        max_ledger_defect: max_defect,
    })
}

/// Terms of the weak formulation over the recorded time span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// ⟨φ_T, f_T⟩ - ⟨φ_0, f_0⟩.
    pub increment: f64,
    /// ∫ ⟨(∂_t + v·∇_x + ½Δ_v) φ, f⟩ dt.
    pub generator: f64,
    /// 2 ∫ ∫∫∫ φ f f dv' dv dx dt.
    pub sink: f64,
    /// increment - generator + sink.
    pub residual: f64,
}

/// 2 ∫∫ φ(t,x,v) f(x,v) ρ(x) dv dx at one time, with ρ the nodal sum.
pub fn sink_pairing(f: &DensityField, phi: &dyn TestFunction, t: f64) -> f64 {
    let grid = &f.grid;
    let nvb = grid.v_nodes();
    let hvd = grid.hv.powi(grid.dim as i32);
    let d = grid.dim;
    let total: f64 = f
        .values
        .par_chunks(nvb)
        .enumerate()
        .map(|(row, vals)| {
            let rho: f64 = vals.iter().sum::<f64>() * hvd;
            if rho == 0.0 {
                return 0.0;
            }
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            grid.x_point(row, &mut x[..d]);
            let mut acc = 0.0;
            for (col, &fv) in vals.iter().enumerate() {
                if fv != 0.0 {
                    grid.v_point(col, &mut v[..d]);
                    acc += phi.value(t, &x[..d], &v[..d]) * fv;
                }
            }
            acc * rho
        })
        .sum();
    2.0 * total * grid.cell_volume()
}

/// Weak-form residual of a trajectory recorded at every step; time
/// integrals use the trapezoid rule on the snapshot times.
pub fn weak_residual(traj: &PdeTrajectory, phi: &dyn TestFunction) -> Result<WeakResidual> {
    let snaps = &traj.snapshots;
    if snaps.len() < 2 {
        return Err(invalid("trajectory", "need at least two snapshots"));
    }
    if !matches!(traj.options.observe, Observation::EveryStep) {
        log::warn!("weak residual on a sparsely observed trajectory; time quadrature is coarse");
    }
    let first = &snaps[0];
    let last = &snaps[snaps.len() - 1];
    let increment = last.pair(phi, last.t) - first.pair(phi, first.t);
    let gen: Vec<f64> = snaps
        .iter()
        .map(|s| s.weighted_sum(|x, v, f| phi.generator(s.t, x, v) * f))
        .collect();
    let sink: Vec<f64> = if traj.options.sink {
        snaps.iter().map(|s| sink_pairing(s, phi, s.t)).collect()
    } else {
        vec![0.0; snaps.len()]
    };
    let trap = |vals: &[f64]| -> f64 {
        snaps
            .windows(2)
            .zip(vals.windows(2))
            .map(|(s, g)| 0.5 * (s[1].t - s[0].t) * (g[0] + g[1]))
            .sum()
    };
    let generator = trap(&gen);
    let sink = trap(&sink);
    Ok(WeakResidual {
        increment,
        generator,
        sink,
        residual: increment - generator + sink,
    })
}

/// Outcome of a single nonexpansiveness check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub before: f64,
    pub after: f64,
    pub passed: bool,
}

impl ContractionCheck {
    /// `before·(1 + 1e-10) - after`; nonnegative on success.
    pub fn margin(&self) -> f64 {
        self.before * (1.0 + 1e-10) - self.after
    }
}

/// ‖D f - D g‖₁ ≤ ‖f - g‖₁ (1 + 1e-10) for `D = transport ∘ diffusion`.
pub fn l1_contraction_check(f: &DensityField, g: &DensityField, dt: f64) -> Result<ContractionCheck> {
    let before = f.l1_distance(g)?;
    let mut a = f.clone();
    let mut b = g.clone();
    diffusion_step(&mut a, dt)?;
    transport_step(&mut a, dt)?;
    diffusion_step(&mut b, dt)?;
    transport_step(&mut b, dt)?;
    let after = a.l1_distance(&b)?;
    Ok(ContractionCheck {
        before,
        after,
        passed: after <= before * (1.0 + 1e-10),
    })
}

/// One row of a paired-run stability record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub t: f64,
    pub distance: f64,
    pub bound: f64,
}

/// Paired solver runs and their Gronwall envelope `δ₀ e^{Ct}` with
/// `C = 2 (sup ρ_f + sup ρ_g)` over both trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub initial_distance: f64,
    pub constant: f64,
    pub records: Vec<StabilityRecord>,
}

impl StabilityReport {
    pub fn holds(&self) -> bool {
        self.records.iter().all(|r| r.distance <= r.bound * (1.0 + 1e-12))
    }
}

pub fn gronwall_paired_run(f: &DensityField, g: &DensityField, horizon: f64, dt: f64) -> Result<StabilityReport> {
    let options = SolveOptions::new(dt).observe(Observation::EveryStep);
    let a = solve(f, horizon, &options)?;
    let b = solve(g, horizon, &options)?;
    let constant = 2.0 * (a.sup_rho() + b.sup_rho());
    let initial_distance = f.l1_distance(g)?;
    let records = a
        .snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(p, q)| {
            Ok(StabilityRecord {
                t: p.t - f.t,
                distance: p.l1_distance(q)?,
                bound: initial_distance * (constant * (p.t - f.t)).exp(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport {
        initial_distance,
        constant,
        records,
    })
}

/// Write ρ(t, x) rows `(config_hash, t, x…, rho)` for every snapshot.
pub fn write_marginals_csv<W: Write>(w: W, traj: &PdeTrajectory, provenance: &Provenance) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let d = traj.snapshots.first().map_or(1, |s| s.grid.dim);
    let mut head = vec!["config_hash".to_string(), "t".to_string()];
    head.extend((1..=d).map(|a| format!("x{a}")));
    head.push("rho".into());
    wtr.write_record(&head)?;
    for s in &traj.snapshots {
        let mut x = vec![0.0; d];
        for (row, r) in s.rho().into_iter().enumerate() {
            s.grid.x_point(row, &mut x);
            let mut rec = vec![provenance.config_hash.clone(), s.t.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            rec.push(r.to_string());
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Write the mass curve `(config_hash, t, mass, reaction_loss, leakage, sup_rho)`.
pub fn write_mass_csv<W: Write>(w: W, traj: &PdeTrajectory, provenance: &Provenance) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["config_hash", "t", "mass", "reaction_loss", "leakage", "sup_rho"])?;
    for m in &traj.mass_curve {
        wtr.write_record([
            provenance.config_hash.clone(),
            m.t.to_string(),
            m.mass.to_string(),
            m.reaction_loss.to_string(),
            m.leakage.to_string(),
            m.sup_rho.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
