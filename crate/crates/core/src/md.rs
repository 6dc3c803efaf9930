//! Event-driven hard-sphere dynamics on the torus.
//!
//! The engine processes a time-ordered queue of predicted pair contacts and
//! cell-boundary crossings. Particle positions are stored unwrapped at each
//! particle's last velocity change and advanced lazily, so free flight is a
//! single multiply-add and the trajectory produced by composed `run_until`
//! calls is bit-for-bit the trajectory of one long call (nothing in the
//! scheduling depends on the requested end time).
//!
//! Stale events are skipped at pop via per-particle collision counters.
//! Every event that survives the counter check is a genuine contact: the
//! scheduled root lies on the free-flight continuation of both particles
//! through one periodic image, and a counter match certifies that both have
//! flown freely since the prediction.
//!
//! Coverage argument for the cell mode (why no contact is ever missed):
//! every particle is re-predicted against the full 3^d cell neighborhood at
//! each of its crossings and collisions. Let s be the last such event of
//! either partner before a contact at t_c. No crossing happens in (s, t_c),
//! so both particles sit in the cells they occupied at s and the pair was
//! within the neighborhood scanned at s, with per-axis separation <= 2 cell
//! sides and per-axis relative motion before contact <= 2 cell sides.
//! Therefore (a) a prediction horizon of 2 cell sides of relative inf-norm
//! motion suffices, and (b) once the torus is at least 7 cells wide the
//! contact image is the minimal image at s (|contact image| <= 3 cells
//! < side/2), so the single nearest-image quadratic finds it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_elastic_collision, contact_deflection, entry_root, predict_pair_collision, Vector,
};
use crate::init::{Configuration, GasParameters};
use crate::tol;

/// How much of the collision history to keep in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogMode {
    /// Count collisions only.
    Off,
    /// Keep entries that involve the tagged particle.
    TaggedOnly,
    /// Keep everything (required for collision-tree reconstruction).
    Full,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogEntry<const D: usize> {
    pub time: f64,
    pub i: u32,
    pub j: u32,
    /// Unit contact normal from particle i to particle j.
    pub omega: Vector<D>,
    pub v_i_pre: Vector<D>,
    pub v_j_pre: Vector<D>,
    pub v_i_post: Vector<D>,
    pub v_j_post: Vector<D>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionLog<const D: usize> {
    pub mode: LogMode,
    pub entries: Vec<LogEntry<D>>,
}

/// One vertex of the tagged particle's piecewise-linear path: its state just
/// after a collision or at an explicitly requested sample time. Positions are
/// unwrapped (no modular jumps), so increments are physical displacements.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaggedSample<const D: usize> {
    pub time: f64,
    pub position: Vector<D>,
    pub velocity: Vector<D>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConservationReport {
    /// |sum v - sum v_0|_inf scaled by sqrt(N/beta), the equilibrium
    /// standard deviation of one total-momentum component.
    pub momentum_drift: f64,
    /// |E - E_0| / E_0.
    pub energy_drift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EventKind {
    /// Predicted contact with particle j (counter captured at scheduling).
    Pair { j: u32, count_j: u32 },
    /// Particle i leaves its cell along `axis` in direction `dir`.
    Crossing { axis: u8, dir: i8 },
    /// Cell-free mode only: re-examine pair (i, j) whose previous prediction
    /// horizon is about to expire.
    Refresh { j: u32, count_j: u32 },
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    i: u32,
    count_i: u32,
    kind: EventKind,
}

impl Event {
    /// Total order: time, then kind (contacts first), then indices. Exact
    /// float ties are broken deterministically so identical runs replay
    /// identically.
    fn sort_key(&self) -> (f64, u8, u32, u32) {
        match self.kind {
            EventKind::Pair { j, .. } => (self.time, 0, self.i, j),
            EventKind::Crossing { axis, dir } => {
                (self.time, 1, self.i, axis as u32 * 2 + (dir > 0) as u32)
            }
            EventKind::Refresh { j, .. } => (self.time, 2, self.i, j),
        }
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want the earliest event on top
        let (ta, ka, ia, ja) = self.sort_key();
        let (tb, kb, ib, jb) = other.sort_key();
        tb.total_cmp(&ta).then(kb.cmp(&ka)).then(ib.cmp(&ia)).then(jb.cmp(&ja))
    }
}

struct CellGrid<const D: usize> {
    m: usize,
    cell: f64,
    occupants: Vec<Vec<u32>>,
    /// Unwrapped integer cell coordinates per particle; the box cell is the
    /// componentwise value mod m. Kept unwrapped so boundary positions
    /// (k * cell) follow the unwrapped particle positions exactly.
    coords: Vec<[i64; D]>,
}

impl<const D: usize> CellGrid<D> {
    fn bucket_of(&self, c: &[i64; D]) -> usize {
        let mut idx = 0usize;
        for a in 0..D {
            idx = idx * self.m + c[a].rem_euclid(self.m as i64) as usize;
        }
        idx
    }
}

/// Below this particle count the cell machinery costs more than it saves and
/// the engine runs in cell-free mode with per-pair refresh events.
const CELL_FREE_MAX_N: usize = 64;
/// Target mean occupancy used to choose the cell count.
const CELL_OCCUPANCY: f64 = 8.0;
/// Torus widths (in cells) at which the nearest-image quadratic alone is
/// provably sufficient; below it, predictions enumerate periodic images.
const SINGLE_IMAGE_MIN_CELLS: usize = 7;

pub struct SimState<const D: usize> {
    pub params: GasParameters<D>,
    /// Unwrapped position of particle i at time stamp[i].
    x: Vec<Vector<D>>,
    v: Vec<Vector<D>>,
    stamp: Vec<f64>,
    counter: Vec<u32>,
    clock: f64,
    queue: BinaryHeap<Event>,
    cells: Option<CellGrid<D>>,
    log: CollisionLog<D>,
    collision_count: u64,
    grazing_count: u64,
    processed_events: u64,
    tagged_path: Vec<TaggedSample<D>>,
    initial_momentum: Vector<D>,
    initial_energy: f64,
}

impl<const D: usize> std::fmt::Debug for SimState<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimState")
            .field("n", &self.x.len())
            .field("clock", &self.clock)
            .field("collisions", &self.collision_count)
            .field("cells_per_axis", &self.cells.as_ref().map(|g| g.m))
            .finish()
    }
}

/// Build a simulation from a validated configuration with the default cell
/// layout and full collision logging.
pub fn init_simulation<const D: usize>(
    conf: &Configuration<D>,
    params: &GasParameters<D>,
) -> Result<SimState<D>> {
    SimState::with_options(conf, params, None, LogMode::Full)
}

impl<const D: usize> SimState<D> {
    pub fn new(conf: &Configuration<D>, params: &GasParameters<D>) -> Result<Self> {
        Self::with_options(conf, params, None, LogMode::Full)
    }

    pub fn with_options(
        conf: &Configuration<D>,
        params: &GasParameters<D>,
        cells_per_axis: Option<usize>,
        log_mode: LogMode,
    ) -> Result<Self> {
        let n = conf.len();
        if n != params.n {
            return Err(Error::InvalidParam(format!(
                "configuration has {n} particles, parameters say {}",
                params.n
            )));
        }
        let geom = params.geom;
        let eps = params.eps;
        // refuse overlapping input, with the same contact-band tolerance the
        // predictor uses so freshly-collided snapshots are accepted
        let band = eps * (1.0 - tol::CONTACT_RTOL);
        for i in 0..n {
            for j in 0..i {
                let d2 = geom.separation(conf.positions[i], conf.positions[j]).norm_sq();
                if d2 < band * band {
                    return Err(Error::ExclusionViolated { i, j, dist: d2.sqrt(), eps });
                }
            }
        }

        let cells = match cells_per_axis {
            Some(m) => {
                let max_m = (geom.side() / (2.0 * eps)).floor() as usize;
                if m < 3 || m > max_m {
                    return Err(Error::InvalidParam(format!(
                        "cells_per_axis {m} outside [3, {max_m}] (cell side must be >= 2 eps)"
                    )));
                }
                Some(m)
            }
            None => {
                let by_occupancy =
                    (n as f64 / CELL_OCCUPANCY).powf(1.0 / D as f64).round() as usize;
                let max_m = (geom.side() / (2.0 * eps)).floor() as usize;
                let m = by_occupancy.clamp(3, max_m.max(3));
                if n <= CELL_FREE_MAX_N || max_m < 3 {
                    None
                } else {
                    Some(m)
                }
            }
        };

        let cells = cells.map(|m| {
            let cell = geom.side() / m as f64;
            let mut grid = CellGrid {
                m,
                cell,
                occupants: vec![Vec::new(); m.pow(D as u32)],
                coords: Vec::with_capacity(n),
            };
            for x in &conf.positions {
                let mut c = [0i64; D];
                for a in 0..D {
                    c[a] = ((x[a] / cell) as i64).clamp(0, m as i64 - 1);
                }
                let b = grid.bucket_of(&c);
                grid.occupants[b].push(grid.coords.len() as u32);
                grid.coords.push(c);
            }
            grid
        });

        let momentum = conf.velocities.iter().fold(Vector::<D>([0.0; D]), |a, v| a + *v);
        let energy = conf.velocities.iter().map(|v| 0.5 * v.norm_sq()).sum();
        let mut state = SimState {
            params: *params,
            x: conf.positions.clone(),
            v: conf.velocities.clone(),
            stamp: vec![0.0; n],
            counter: vec![0; n],
            clock: 0.0,
            queue: BinaryHeap::new(),
            cells,
            log: CollisionLog { mode: log_mode, entries: Vec::new() },
            collision_count: 0,
            grazing_count: 0,
            processed_events: 0,
            tagged_path: Vec::new(),
            initial_momentum: momentum,
            initial_energy: energy,
        };
        state.tagged_path.push(TaggedSample {
            time: 0.0,
            position: state.x[0],
            velocity: state.v[0],
        });
        state.schedule_all()?;
        Ok(state)
    }

    fn schedule_all(&mut self) -> Result<()> {
        let n = self.x.len();
        if self.cells.is_some() {
            for i in 0..n {
                self.schedule_crossing(i as u32);
            }
            for i in 0..n {
                self.predict_against_neighborhood(i as u32, Some(i as u32))?;
            }
        } else {
            for i in 0..n {
                for j in 0..i {
                    self.predict_pair(i as u32, j as u32)?;
                }
            }
        }
        Ok(())
    }

    /// Position of particle i at the current clock (pure computation).
    #[inline]
    fn pos_at_clock(&self, i: u32) -> Vector<D> {
        let i = i as usize;
        self.x[i] + self.v[i] * (self.clock - self.stamp[i])
    }

    /// Advance particle i's stored state to the current clock.
    #[inline]
    fn materialize(&mut self, i: u32) {
        let i = i as usize;
        self.x[i] = self.x[i] + self.v[i] * (self.clock - self.stamp[i]);
        self.stamp[i] = self.clock;
    }

    fn push(&mut self, ev: Event) {
        self.queue.push(ev);
    }

    /// Schedule particle i's next cell-boundary crossing. Boundary positions
    /// come from the unwrapped integer cell coordinates, so no position is
    /// ever snapped and free flight stays exact.
    fn schedule_crossing(&mut self, i: u32) {
        let Some(grid) = &self.cells else { return };
        let iu = i as usize;
        let c = grid.coords[iu];
        let cell = grid.cell;
        let mut best = f64::INFINITY;
        let mut best_axis = 0u8;
        let mut best_dir = 0i8;
        for a in 0..D {
            let va = self.v[iu][a];
            if va == 0.0 {
                continue;
            }
            let boundary = if va > 0.0 { (c[a] + 1) as f64 * cell } else { c[a] as f64 * cell };
            let t = self.stamp[iu] + (boundary - self.x[iu][a]) / va;
            if t < best {
                best = t;
                best_axis = a as u8;
                best_dir = if va > 0.0 { 1 } else { -1 };
            }
        }
        if best.is_finite() {
            self.push(Event {
                // clamp: a particle materialized a rounding error past its
                // boundary would otherwise schedule into the past
                time: best.max(self.clock),
                i,
                count_i: self.counter[i as usize],
                kind: EventKind::Crossing { axis: best_axis, dir: best_dir },
            });
        }
    }

    /// Predict the contact of pair (i, j) from their current states and
    /// schedule it. In cell mode with a wide torus this is the bare
    /// nearest-image quadratic; otherwise periodic images are enumerated
    /// within the coverage horizon.
    fn predict_pair(&mut self, i: u32, j: u32) -> Result<()> {
        let (iu, ju) = (i as usize, j as usize);
        let eps = self.params.eps;
        let geom = self.params.geom;
        let xi = self.pos_at_clock(i);
        let xj = self.pos_at_clock(j);
        let w = self.v[ju] - self.v[iu];
        let dt = match &self.cells {
            Some(grid) if grid.m >= SINGLE_IMAGE_MIN_CELLS => {
                let r0 = geom.minimal_image(xj - xi);
                let c = r0.norm_sq() - eps * eps;
                // c <= 0 only inside the contact band of a just-processed
                // collision (receding); entry_root rejects it
                entry_root(r0, w, c)
            }
            Some(grid) => {
                let wmax = w.norm_inf();
                if wmax == 0.0 {
                    None
                } else {
                    // relative motion beyond 2 cell sides is re-covered by the
                    // crossing that must happen first (see module docs)
                    let horizon = 2.5 * grid.cell / wmax;
                    predict_pair_collision(xi, self.v[iu], xj, self.v[ju], eps, &geom, horizon)?
                }
            }
            None => {
                let wmax = w.norm_inf();
                if wmax == 0.0 {
                    None
                } else {
                    let horizon = geom.side() / wmax;
                    let hit = predict_pair_collision(
                        xi, self.v[iu], xj, self.v[ju], eps, &geom, horizon,
                    )?;
                    // keep the pair covered past the horizon
                    self.push(Event {
                        time: self.clock + 0.9 * horizon,
                        i,
                        count_i: self.counter[iu],
                        kind: EventKind::Refresh { j, count_j: self.counter[ju] },
                    });
                    hit
                }
            }
        };
        if let Some(dt) = dt {
            self.push(Event {
                time: self.clock + dt,
                i,
                count_i: self.counter[iu],
                kind: EventKind::Pair { j, count_j: self.counter[ju] },
            });
        }
        Ok(())
    }

    /// Predict particle i against every particle in the 3^d cells around its
    /// current cell (cell mode), or against everyone (cell-free mode).
    fn predict_against_neighborhood(&mut self, i: u32, below_only: Option<u32>) -> Result<()> {
        match &self.cells {
            Some(grid) => {
                let ci = grid.coords[i as usize];
                let m = grid.m;
                let mut candidates: Vec<u32> = Vec::new();
                let mut off = [-1i64; D];
                loop {
                    let mut c = ci;
                    for a in 0..D {
                        c[a] += off[a];
                    }
                    let b = {
                        let mut idx = 0usize;
                        for a in 0..D {
                            idx = idx * m + c[a].rem_euclid(m as i64) as usize;
                        }
                        idx
                    };
                    candidates.extend(grid.occupants[b].iter().copied());
                    let mut a = 0;
                    loop {
                        if a == D {
                            for j in candidates {
                                if j != i && below_only.map_or(true, |cap| j < cap) {
                                    self.predict_pair(i, j)?;
                                }
                            }
                            return Ok(());
                        }
                        off[a] += 1;
                        if off[a] <= 1 {
                            break;
                        }
                        off[a] = -1;
                        a += 1;
                    }
                }
            }
            None => {
                for j in 0..self.x.len() as u32 {
                    if j != i && below_only.map_or(true, |cap| j < cap) {
                        self.predict_pair(i, j)?;
                    }
                }
                Ok(())
            }
        }
    }

    /// Advance the simulation to `t_end`, processing every event up to and
    /// including that time. Positions at t_end are free-flight extrapolations
    /// from each particle's last event; no state is materialized at t_end
    /// itself, so composed calls replay one long call exactly.
    pub fn run_until(&mut self, t_end: f64) -> Result<()> {
        if t_end < self.clock {
            return Err(Error::InvalidParam(format!(
                "run_until target {t_end} precedes the clock {}",
                self.clock
            )));
        }
        while let Some(ev) = self.queue.peek() {
            if ev.time > t_end {
                break;
            }
            let ev = *ev;
            self.queue.pop();
            if self.counter[ev.i as usize] != ev.count_i {
                continue;
            }
            match ev.kind {
                EventKind::Pair { j, count_j } | EventKind::Refresh { j, count_j } => {
                    if self.counter[j as usize] != count_j {
                        continue;
                    }
                }
                EventKind::Crossing { .. } => {}
            }
            if ev.time < self.clock {
                return Err(Error::EventTimeRegression { event: ev.time, clock: self.clock });
            }
            self.clock = ev.time;
            self.processed_events += 1;
            match ev.kind {
                EventKind::Pair { j, .. } => self.process_contact(ev.i, j)?,
                EventKind::Crossing { axis, dir } => self.process_crossing(ev.i, axis, dir)?,
                EventKind::Refresh { j, .. } => self.predict_pair(ev.i, j)?,
            }
        }
        self.clock = t_end;
        Ok(())
    }

    fn process_contact(&mut self, i: u32, j: u32) -> Result<()> {
        self.materialize(i);
        self.materialize(j);
        let (iu, ju) = (i as usize, j as usize);
        let omega = contact_deflection(self.x[iu], self.x[ju], &self.params.geom, self.params.eps)?;
        // omega points from i to j, so d|x_j - x_i|/dt = -sigma at contact:
        // the pair is approaching exactly when sigma > 0.
        let sigma = (self.v[iu] - self.v[ju]).dot(omega);
        if sigma <= tol::GRAZING_ATOL {
            // Grazing or receding: the scattering rule is the identity. Do not
            // re-predict the pair here; at a tangency the prediction can return
            // the same instant again (c is a roundoff away from zero) and loop.
            // Coverage is safe without it: past closest approach the relative
            // free flight separates monotonically, so any later contact uses a
            // different periodic image and is preceded by a cell crossing (cell
            // mode) or a refresh event (cell-free mode), both of which re-scan
            // the pair.
            self.grazing_count += 1;
            return Ok(());
        }
        let (vi_post, vj_post) = apply_elastic_collision(self.v[iu], self.v[ju], omega)?;
        if self.log.mode == LogMode::Full
            || (self.log.mode == LogMode::TaggedOnly && (i == 0 || j == 0))
        {
            self.log.entries.push(LogEntry {
                time: self.clock,
                i,
                j,
                omega,
                v_i_pre: self.v[iu],
                v_j_pre: self.v[ju],
                v_i_post: vi_post,
                v_j_post: vj_post,
            });
        }
        self.collision_count += 1;
        self.v[iu] = vi_post;
        self.v[ju] = vj_post;
        self.counter[iu] += 1;
        self.counter[ju] += 1;
        if i == 0 || j == 0 {
            self.tagged_path.push(TaggedSample {
                time: self.clock,
                position: self.x[0],
                velocity: self.v[0],
            });
        }
        self.schedule_crossing(i);
        self.schedule_crossing(j);
        self.predict_against_neighborhood(i, None)?;
        self.predict_against_neighborhood(j, None)?;
        Ok(())
    }

    fn process_crossing(&mut self, i: u32, axis: u8, dir: i8) -> Result<()> {
        {
            let grid = self.cells.as_mut().expect("crossing events exist only in cell mode");
            let iu = i as usize;
            let old_bucket = grid.bucket_of(&grid.coords[iu]);
            grid.coords[iu][axis as usize] += dir as i64;
            let new_bucket = grid.bucket_of(&grid.coords[iu]);
            if new_bucket != old_bucket {
                let slot = grid.occupants[old_bucket]
                    .iter()
                    .position(|&p| p == i)
                    .expect("particle listed in its cell");
                grid.occupants[old_bucket].swap_remove(slot);
                grid.occupants[new_bucket].push(i);
            }
        }
        self.schedule_crossing(i);
        self.predict_against_neighborhood(i, None)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn collision_count(&self) -> u64 {
        self.collision_count
    }

    pub fn grazing_count(&self) -> u64 {
        self.grazing_count
    }

    pub fn processed_events(&self) -> u64 {
        self.processed_events
    }

    pub fn log(&self) -> &CollisionLog<D> {
        &self.log
    }

    pub fn cells_per_axis(&self) -> Option<usize> {
        self.cells.as_ref().map(|g| g.m)
    }

    /// Per-particle collision rate so far: each collision involves two
    /// particles, hence the factor 2.
    pub fn collision_frequency(&self) -> f64 {
        if self.clock <= 0.0 {
            return 0.0;
        }
        2.0 * self.collision_count as f64 / (self.x.len() as f64 * self.clock)
    }

    pub fn conservation_report(&self) -> ConservationReport {
        let momentum = self.v.iter().fold(Vector::<D>([0.0; D]), |a, v| a + *v);
        let energy: f64 = self.v.iter().map(|v| 0.5 * v.norm_sq()).sum();
        let scale = (self.x.len() as f64 / self.params.beta).sqrt();
        ConservationReport {
            momentum_drift: (momentum - self.initial_momentum).norm_inf() / scale,
            energy_drift: (energy - self.initial_energy).abs() / self.initial_energy,
        }
    }

    /// Wrapped configuration at the current clock (free-flight extrapolation;
    /// does not advance the simulation).
    pub fn current_configuration(&self) -> Configuration<D> {
        let geom = &self.params.geom;
        Configuration {
            positions: (0..self.x.len() as u32)
                .map(|i| geom.wrap(self.pos_at_clock(i)))
                .collect(),
            velocities: self.v.clone(),
            tagged_index: 0,
        }
    }

    /// Tagged particle's unwrapped position and velocity at the clock.
    pub fn tagged_state(&self) -> (f64, Vector<D>, Vector<D>) {
        (self.clock, self.pos_at_clock(0), self.v[0])
    }

    /// Append the tagged particle's current state to its recorded path.
    pub fn sample_tagged(&mut self) {
        let (time, position, velocity) = self.tagged_state();
        self.tagged_path.push(TaggedSample { time, position, velocity });
    }

    /// Piecewise-linear tagged path: one sample at t = 0, one after every
    /// tagged collision, plus explicitly requested samples.
    pub fn tagged_trajectory(&self) -> &[TaggedSample<D>] {
        &self.tagged_path
    }

    /// Negate every velocity at the current instant and rebuild the schedule.
    /// Running for another t after reversing at time t replays the history
    /// backwards (up to roundoff amplified by collisions).
    pub fn reverse_velocities(&mut self) -> Result<()> {
        for i in 0..self.x.len() as u32 {
            self.materialize(i);
        }
        for (v, c) in self.v.iter_mut().zip(&mut self.counter) {
            *v = -*v;
            *c += 1;
        }
        self.queue.clear();
        self.schedule_all()
    }

    /// Smallest current pairwise distance, by full O(N^2) scan (diagnostics).
    pub fn min_pair_distance_now(&self) -> f64 {
        let geom = &self.params.geom;
        let pos: Vec<Vector<D>> =
            (0..self.x.len() as u32).map(|i| self.pos_at_clock(i)).collect();
        let mut best = f64::INFINITY;
        for i in 0..pos.len() {
            for j in 0..i {
                best = best.min(geom.separation(pos[i], pos[j]).norm());
            }
        }
        best
    }

    /// Earliest still-valid event in the queue (diagnostics / oracle tests).
    pub fn next_event_time(&self) -> Option<f64> {
        self.queue
            .iter()
            .filter(|ev| {
                self.counter[ev.i as usize] == ev.count_i
                    && match ev.kind {
                        EventKind::Pair { j, count_j } | EventKind::Refresh { j, count_j } => {
                            self.counter[j as usize] == count_j
                        }
                        EventKind::Crossing { .. } => true,
                    }
            })
            .map(|ev| ev.time)
            .min_by(f64::total_cmp)
    }

    /// Earliest still-valid pair contact in the queue.
    pub fn next_contact_time(&self) -> Option<f64> {
        self.queue
            .iter()
            .filter(|ev| {
                matches!(ev.kind, EventKind::Pair { j, count_j }
                    if self.counter[j as usize] == count_j)
                    && self.counter[ev.i as usize] == ev.count_i
            })
            .map(|ev| ev.time)
            .min_by(f64::total_cmp)
    }
}
