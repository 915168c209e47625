//! Synthetic ground truth: volume fraction advected by a prescribed
//! divergence-free velocity field with first-order upwind finite volumes.
//!
//! The unit square is discretized into `n×n` cells, row 0 at the top. The
//! stream function lives on cell corners, so every face flux is a difference
//! of two corner values and the discrete divergence of each cell telescopes
//! to zero. The generator integrates on a grid `refine` times finer than the
//! output and block-averages each recorded frame down to `k×k`.
//!
//! Generator state is always `f64`; frames are cast to the caller's scalar
//! type on output.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LfsError, Result};
use crate::field::{split_dataset, Dataset, GridFrame, SimulationSeries, Source};
use crate::Scalar;

/// Largest per-cell outflow Courant number the sub-stepping aims for.
pub const TARGET_COURANT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Output grid side.
    pub k: usize,
    /// Output frames.
    pub steps: usize,
    /// Unit time intervals between recorded frames.
    pub substeps: usize,
    pub v: f64,
    /// Fraction of the top boundary that injects liquid.
    pub inlet_width: f64,
    /// Left edge of the inlet strip, as a fraction of the domain width.
    pub inlet_start: f64,
    /// Solver cells per output cell along each axis.
    pub refine: usize,
    /// Stream function scale per unit velocity.
    pub gain: f64,
    /// Relative strength of the recirculation cells.
    pub recirculation: f64,
    /// Carried for provenance; the generator itself draws no random numbers.
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 32,
            steps: 100,
            substeps: 10,
            v: 0.01,
            inlet_width: 0.2,
            inlet_start: 0.15,
            refine: 8,
            gain: 0.1,
            recirculation: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 8 {
            return Err(invalid(format!("generator needs k >= 8, got {}", self.k)));
        }
        if self.steps < 2 {
            return Err(invalid("generator needs at least 2 output frames"));
        }
        if self.substeps == 0 || self.refine == 0 {
            return Err(invalid("substeps and refine must be positive"));
        }
        if !(self.inlet_width > 0.0 && self.inlet_width <= 1.0) {
            return Err(invalid(format!("inlet width {} outside (0, 1]", self.inlet_width)));
        }
        if !(self.inlet_start >= 0.0 && self.inlet_start + self.inlet_width <= 1.0) {
            return Err(invalid("inlet strip must lie inside the top boundary"));
        }
        if !self.v.is_finite() || !self.gain.is_finite() || !self.recirculation.is_finite() {
            return Err(invalid("velocity parameters must be finite"));
        }
        Ok(())
    }

    pub fn solver_cells(&self) -> usize {
        self.k * self.refine
    }

    /// Outlet strip on the top boundary, right of the inlet.
    fn outlet(&self) -> (f64, f64) {
        let end = 0.95f64.max(self.inlet_start + self.inlet_width + 0.1).min(1.0);
        let start = (end - 0.15).max(self.inlet_start + self.inlet_width);
        (start, end)
    }

    /// Stream function at physical position `x ∈ [0,1]` (rightward) and depth
    /// `d ∈ [0,1]` (downward from the top).
    pub fn stream(&self, x: f64, d: f64) -> f64 {
        // exact zeros on the walls, where the trig terms only round to zero
        if x <= 0.0 || x >= 1.0 || d >= 1.0 {
            return 0.0;
        }
        let (a0, a1) = (self.inlet_start, self.inlet_start + self.inlet_width);
        let (b0, b1) = self.outlet();
        let plateau = smoothstep((x - a0) / (a1 - a0)) - smoothstep((x - b0) / (b1 - b0));
        let through = plateau * (0.5 * PI * d.clamp(0.0, 1.0)).cos();
        let cells = self.recirculation * (2.0 * PI * x).sin() * (PI * d).sin();
        self.v * self.gain * (through + cells)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Boundary treatment for [`step_transport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Boundary {
    /// No flux through any boundary face.
    Closed,
    /// Opposite edges are joined.
    Periodic,
    /// No-flux sides and bottom; the top admits flow in both directions.
    /// Inflow through top faces in columns `[inlet_start, inlet_end)` carries
    /// `inlet_alpha`, inflow elsewhere carries gas; outflow carries the cell's
    /// own volume fraction.
    Column {
        inlet_start: usize,
        inlet_end: usize,
        inlet_alpha: f64,
    },
}

/// Velocity on an `n×n` grid: face fluxes for transport plus cell-centred
/// components for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    n: usize,
    /// Rightward flux through vertical faces, `n` rows × `n+1` columns,
    /// in cell volumes per unit time.
    fx: Vec<f64>,
    /// Downward flux through horizontal faces, `n+1` rows × `n` columns.
    fy: Vec<f64>,
    /// Cell-centred rightward velocity, cells per unit time.
    pub ux: Vec<f64>,
    /// Cell-centred upward velocity, cells per unit time.
    pub uy: Vec<f64>,
}

impl VelocityField {
    /// Samples a stream function `psi(x, depth)` on the unit square.
    pub fn from_stream(n: usize, psi: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / n as f64;
        let scale = (n * n) as f64;
        let corners: Vec<f64> = (0..=n)
            .flat_map(|i| (0..=n).map(move |j| (i, j)))
            .map(|(i, j)| psi(j as f64 * h, i as f64 * h))
            .collect();
        let c = |i: usize, j: usize| corners[i * (n + 1) + j];
        let mut fx = vec![0.0; n * (n + 1)];
        for i in 0..n {
            for j in 0..=n {
                fx[i * (n + 1) + j] = (c(i, j) - c(i + 1, j)) * scale;
            }
        }
        let mut fy = vec![0.0; (n + 1) * n];
        for i in 0..=n {
            for j in 0..n {
                fy[i * n + j] = (c(i, j + 1) - c(i, j)) * scale;
            }
        }
        // central differences of psi sampled at cell centres
        let mut ux = vec![0.0; n * n];
        let mut uy = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (x, d) = ((j as f64 + 0.5) * h, (i as f64 + 0.5) * h);
                ux[i * n + j] = -(psi(x, d + h) - psi(x, d - h)) / 2.0 * n as f64 * n as f64;
                uy[i * n + j] = -(psi(x + h, d) - psi(x - h, d)) / 2.0 * n as f64 * n as f64;
            }
        }
        Self { n, fx, fy, ux, uy }
    }

    /// Spatially uniform velocity (cells per unit time), for periodic tests.
    pub fn uniform(n: usize, ux: f64, uy_up: f64) -> Self {
        Self {
            n,
            fx: vec![ux; n * (n + 1)],
            fy: vec![-uy_up; (n + 1) * n],
            ux: vec![ux; n * n],
            uy: vec![uy_up; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn flux_x(&self, row: usize, face: usize) -> f64 {
        self.fx[row * (self.n + 1) + face]
    }

    pub fn flux_y(&self, face: usize, col: usize) -> f64 {
        self.fy[face * self.n + col]
    }

    pub fn max_speed(&self) -> f64 {
        self.fx.iter().chain(&self.fy).fold(0.0f64, |m, f| m.max(f.abs()))
    }

    /// Largest total outflow Courant number of any cell for a step `dt`.
    pub fn max_outflow_courant(&self, dt: f64, boundary: Boundary) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut out = 0.0;
                let (left, right) = (self.face_x(i, j, boundary), self.face_x(i, j + 1, boundary));
                let (top, bottom) = (self.face_y(i, j, boundary), self.face_y(i + 1, j, boundary));
                out += right.max(0.0) + (-left).max(0.0) + bottom.max(0.0) + (-top).max(0.0);
                worst = worst.max(out * dt);
            }
        }
        worst
    }

    fn face_x(&self, i: usize, face: usize, boundary: Boundary) -> f64 {
        let n = self.n;
        match boundary {
            Boundary::Periodic => self.flux_x(i, face % n),
            _ if face == 0 || face == n => 0.0,
            _ => self.flux_x(i, face),
        }
    }

    fn face_y(&self, face: usize, j: usize, boundary: Boundary) -> f64 {
        let n = self.n;
        match boundary {
            Boundary::Periodic => self.flux_y(face % n, j),
            Boundary::Column { .. } if face == 0 => self.flux_y(0, j),
            _ if face == 0 || face == n => 0.0,
            _ => self.flux_y(face, j),
        }
    }

    /// Cell-centred velocity scaled down to output-cell units by block
    /// averaging `factor × factor` cells.
    pub fn coarsen(&self, factor: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.n / factor;
        let scale = 1.0 / (factor * factor * factor) as f64;
        let mut ux = vec![0.0; k * k];
        let mut uy = vec![0.0; k * k];
        for i in 0..self.n {
            for j in 0..self.n {
                let o = (i / factor) * k + j / factor;
                ux[o] += self.ux[i * self.n + j] * scale;
                uy[o] += self.uy[i * self.n + j] * scale;
            }
        }
        (ux, uy)
    }
}

/// Velocity field of `cfg` on the solver grid.
pub fn make_velocity_field(cfg: &GenConfig) -> Result<VelocityField> {
    cfg.validate()?;
    Ok(VelocityField::from_stream(cfg.solver_cells(), |x, d| cfg.stream(x, d)))
}

/// Max absolute central-difference divergence over interior cells.
pub fn max_interior_divergence(field: &VelocityField) -> f64 {
    let n = field.n;
    let mut worst = 0.0f64;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let dux = (field.ux[i * n + j + 1] - field.ux[i * n + j - 1]) / 2.0;
            // uy points up while rows run down
            let duy = (field.uy[(i - 1) * n + j] - field.uy[(i + 1) * n + j]) / 2.0;
            worst = worst.max((dux + duy).abs());
        }
    }
    worst
}

/// Result of one transport step.
#[derive(Clone, Debug)]
pub struct StepOutcome<S> {
    pub frame: GridFrame<S>,
    /// Net volume entering through the boundary, in cell volumes.
    pub boundary_inflow: f64,
    /// Gross volume leaving through the boundary, in cell volumes.
    pub boundary_outflow: f64,
}

fn check_cfl(field: &VelocityField, dt: f64, boundary: Boundary) -> Result<()> {
    let face = field.max_speed() * dt;
    if face > 1.0 {
        return Err(LfsError::Cfl {
            courant: face,
            limit: 1.0,
        });
    }
    let out = field.max_outflow_courant(dt, boundary);
    if out > 1.0 {
        return Err(LfsError::Cfl {
            courant: out,
            limit: 1.0,
        });
    }
    Ok(())
}

/// In-place upwind update of `alpha` (an `n×n` row-major field). Returns the
/// net boundary inflow and the gross outflow. `scratch` must have the same
/// length as `alpha`.
fn upwind_step(
    alpha: &mut [f64],
    scratch: &mut [f64],
    field: &VelocityField,
    dt: f64,
    boundary: Boundary,
) -> (f64, f64) {
    let n = field.n;
    scratch.copy_from_slice(alpha);
    let mut inflow = 0.0;
    let mut outflow = 0.0;
    // vertical faces
    for i in 0..n {
        let row = i * n;
        let faces = if matches!(boundary, Boundary::Periodic) {
            0..n
        } else {
            1..n
        };
        for face in faces {
            let q = field.face_x(i, face, boundary) * dt;
            if q == 0.0 {
                continue;
            }
            let left = row + (face + n - 1) % n;
            let right = row + face % n;
            let t = if q > 0.0 { q * alpha[left] } else { q * alpha[right] };
            scratch[left] -= t;
            scratch[right] += t;
        }
    }
    // horizontal faces
    let faces = match boundary {
        Boundary::Periodic => 0..n,
        Boundary::Column { .. } => 0..n,
        Boundary::Closed => 1..n,
    };
    for face in faces {
        for j in 0..n {
            let q = field.face_y(face, j, boundary) * dt;
            if q == 0.0 {
                continue;
            }
            let below = face % n * n + j;
            if face == 0 {
                match boundary {
                    Boundary::Periodic => {
                        let above = (n - 1) * n + j;
                        let t = if q > 0.0 { q * alpha[above] } else { q * alpha[below] };
                        scratch[above] -= t;
                        scratch[below] += t;
                    }
                    Boundary::Column {
                        inlet_start,
                        inlet_end,
                        inlet_alpha,
                    } => {
                        let carried = if q > 0.0 {
                            if (inlet_start..inlet_end).contains(&j) {
                                inlet_alpha
                            } else {
                                0.0
                            }
                        } else {
                            alpha[below]
                        };
                        scratch[below] += q * carried;
                        inflow += q * carried;
                        if q < 0.0 {
                            outflow -= q * carried;
                        }
                    }
                    Boundary::Closed => unreachable!("closed top face skipped"),
                }
                continue;
            }
            let above = (face - 1) * n + j;
            let t = if q > 0.0 { q * alpha[above] } else { q * alpha[below] };
            scratch[above] -= t;
            scratch[below] += t;
        }
    }
    alpha.copy_from_slice(scratch);
    (inflow, outflow)
}

/// One first-order upwind step of size `dt`. Fails instead of clamping when
/// the step would violate the CFL bound.
pub fn step_transport<S: Scalar>(
    frame: &GridFrame<S>,
    field: &VelocityField,
    dt: f64,
    boundary: Boundary,
) -> Result<StepOutcome<S>> {
    if frame.k() != field.n {
        return Err(LfsError::Shape(format!(
            "frame has k={} but the velocity field has n={}",
            frame.k(),
            field.n
        )));
    }
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(invalid("time step must be finite and non-negative"));
    }
    check_cfl(field, dt, boundary)?;
    let mut alpha: Vec<f64> = frame.values().iter().map(|v| v.as_f64()).collect();
    let mut scratch = vec![0.0; alpha.len()];
    let (inflow, outflow) = upwind_step(&mut alpha, &mut scratch, field, dt, boundary);
    let out = GridFrame::new(frame.k(), alpha.into_iter().map(S::lit).collect())?.with_cell_size(frame.cell_size());
    Ok(StepOutcome {
        frame: out,
        boundary_inflow: inflow,
        boundary_outflow: outflow,
    })
}

fn block_average<S: Scalar>(alpha: &[f64], n: usize, factor: usize) -> GridFrame<S> {
    let k = n / factor;
    let mut acc = vec![0.0; k * k];
    for i in 0..n {
        for j in 0..n {
            acc[(i / factor) * k + j / factor] += alpha[i * n + j];
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    GridFrame::new(k, acc.into_iter().map(|v| S::lit(v * inv)).collect()).expect("k*k values")
}

/// Column boundary matching the inlet strip of `cfg` on the solver grid.
pub fn column_boundary(cfg: &GenConfig) -> Boundary {
    let n = cfg.solver_cells();
    let start = (cfg.inlet_start * n as f64).floor() as usize;
    let end = ((cfg.inlet_start + cfg.inlet_width) * n as f64).ceil() as usize;
    Boundary::Column {
        inlet_start: start,
        inlet_end: end.min(n),
        inlet_alpha: 1.0,
    }
}

/// Sub-steps per unit time interval needed to keep the outflow Courant
/// number at or below [`TARGET_COURANT`].
pub fn substeps_per_unit(field: &VelocityField, boundary: Boundary) -> usize {
    let c = field.max_outflow_courant(1.0, boundary).max(field.max_speed());
    ((c / TARGET_COURANT).ceil() as usize).max(1)
}

/// Share of the last frames used for the quasi-steady check.
const STEADY_TAIL: f64 = 0.05;
const STEADY_TOL: f64 = 0.01;

/// True when the mean frame-to-frame L2 change over the last 5% of frames
/// is below 1% of the final frame's norm.
pub fn is_quasi_steady<S: Scalar>(frames: &[GridFrame<S>]) -> bool {
    let t = frames.len();
    let tail = ((t as f64 * STEADY_TAIL).ceil() as usize).clamp(1, t - 1);
    let change: f64 = (t - tail..t)
        .map(|i| {
            frames[i]
                .values()
                .iter()
                .zip(frames[i - 1].values())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / tail as f64;
    let last = frames[t - 1].norm();
    change <= STEADY_TOL * last
}

/// Runs the generator from an all-gas state with the inlet active and
/// records one frame every `substeps` unit time intervals.
pub fn generate_series<S: Scalar>(cfg: &GenConfig, series_id: usize) -> Result<SimulationSeries<S>> {
    let field = make_velocity_field(cfg)?;
    let boundary = column_boundary(cfg);
    let n = cfg.solver_cells();
    let per_unit = substeps_per_unit(&field, boundary);
    let dt = 1.0 / per_unit as f64;
    check_cfl(&field, dt, boundary)?;

    let mut alpha = vec![0.0; n * n];
    let mut scratch = vec![0.0; n * n];
    let mut frames = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        for _ in 0..cfg.substeps * per_unit {
            upwind_step(&mut alpha, &mut scratch, &field, dt, boundary);
        }
        frames.push(block_average(&alpha, n, cfg.refine));
    }
    let steady = is_quasi_steady(&frames);
    if !steady {
        log::debug!(
            "series {series_id} (v={}) is not quasi-steady at T={}",
            cfg.v,
            cfg.steps
        );
    }
    let mut series = SimulationSeries::new(frames, cfg.v, series_id, Source::Synthetic)?;
    series.quasi_steady = Some(steady);
    Ok(series)
}

/// Wall-clock seconds of one [`generate_series`] call.
pub fn time_generation(cfg: &GenConfig) -> Result<f64> {
    let start = Instant::now();
    let s = generate_series::<f32>(cfg, 0)?;
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(s);
    Ok(secs)
}

/// One series per velocity (ids follow list order), then a seeded split.
/// Series are generated on up to `workers` threads; the result does not
/// depend on the worker count.
pub fn generate_dataset<S: Scalar>(
    velocities: &[f64],
    template: &GenConfig,
    n_train: usize,
    split_seed: u64,
    workers: usize,
) -> Result<Dataset<S>> {
    let mut sorted = velocities.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("inlet velocities must be pairwise distinct"));
    }
    template.validate()?;
    let series = generate_all(velocities, template, workers)?;
    split_dataset(series, n_train, split_seed)
}

fn generate_all<S: Scalar>(
    velocities: &[f64],
    template: &GenConfig,
    workers: usize,
) -> Result<Vec<SimulationSeries<S>>> {
    let cfg_for = |i: usize| GenConfig {
        v: velocities[i],
        ..template.clone()
    };
    let workers = workers.clamp(1, velocities.len().max(1));
    if workers == 1 {
        return (0..velocities.len()).map(|i| generate_series(&cfg_for(i), i)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SimulationSeries<S>>>> = (0..velocities.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= velocities.len() {
                    break;
                }
                let r = generate_series(&cfg_for(i), i);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// `count` evenly spaced velocities over `[lo, hi]`.
pub fn even_velocities(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}
