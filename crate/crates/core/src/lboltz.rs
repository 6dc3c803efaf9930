//! Velocity-jump process for a tagged particle in a Maxwellian background,
//! and the dense discretized generator for spectral computations.
//!
//! The tagged particle flies freely and, at rate `nu(|v|)`, picks a background
//! velocity `v1` and a deflection direction `omega` with joint density
//! proportional to `M_beta(v1) ((v - v1) . omega)_+`, then jumps to
//! `v' = v - ((v - v1) . omega) omega` (the elastic hard-sphere exchange).
//! Because the rate depends on speed only and speed is constant between
//! jumps, waiting times are exactly exponential: there is no thinning loss.
//!
//! The same generator is assembled as a dense matrix on a uniform Cartesian
//! velocity grid: angular Gauss-type quadrature, background velocities summed
//! with the grid's Maxwellian-weighted quadrature, and post-collision values
//! obtained by multilinear interpolation. Two structural corrections are
//! applied after assembly: symmetrization in the Maxwellian-weighted inner
//! product (detailed balance holds exactly for the continuous operator) and a
//! diagonal projection making the operator annihilate constants exactly. The
//! corrected matrix is then a weighted graph Laplacian with the sign flipped,
//! so dissipativity is structural rather than approximate.

use std::f64::consts::PI;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TorusGeometry, Vector};
use crate::init::{maxwell_speed_density, sample_maxwellian};
use crate::quad;
use crate::stats;
use crate::tol;

/// Full d-dimensional Maxwellian density `(beta/2pi)^(d/2) exp(-beta|v|^2/2)`.
pub fn maxwellian_density<const D: usize>(beta: f64, v: Vector<D>) -> f64 {
    (beta / (2.0 * PI)).powi(D as i32).sqrt() * (-0.5 * beta * v.norm_sq()).exp()
}

/// Angular constant of the hard-sphere kernel: the integral of `(e . omega)_+`
/// over the unit sphere, `|S^(d-2)|/(d-1)`; 2 in two dimensions, pi in three.
pub fn kernel_angular_constant(d: usize) -> f64 {
    match d {
        2 => 2.0,
        3 => PI,
        _ => {
            let m = (d - 1) as f64;
            2.0 * PI.powf(m / 2.0) / libm::tgamma(m / 2.0) / m
        }
    }
}

/// Mean of `|v - v1|` over the unit direction of `v1` at fixed speeds
/// `u = |v|`, `s = |v1|`. Closed form in three dimensions; an adaptive
/// angular quadrature of the analytic integrand in two.
fn angular_mean_relative_speed<const D: usize>(u: f64, s: f64) -> f64 {
    match D {
        2 => {
            let f = move |theta: f64| {
                (u * u + s * s - 2.0 * u * s * theta.cos()).max(0.0).sqrt()
            };
            quad::adaptive(&f, 0.0, PI, 1e-11, 1e-15)
                .expect("bounded analytic angular integrand converges")
                / PI
        }
        3 => {
            if u * s < 1e-14 {
                let (hi, lo) = if u > s { (u, s) } else { (s, u) };
                if hi == 0.0 {
                    0.0
                } else {
                    hi + lo * lo / (3.0 * hi)
                }
            } else {
                ((u + s).powi(3) - (u - s).abs().powi(3)) / (6.0 * u * s)
            }
        }
        _ => unreachable!("supported dimensions are 2 and 3"),
    }
}

/// Total jump rate as a function of speed:
/// `nu(u) = c_d * E[|v - v1|]` with `v1` Maxwellian, by adaptive quadrature
/// over the background speed.
pub fn jump_rate_of_speed<const D: usize>(u: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !u.is_finite() || u < 0.0 {
        return Err(Error::InvalidParam(format!(
            "need beta > 0 and a finite nonnegative speed, got beta {beta}, u {u}"
        )));
    }
    if D < 2 || D > 3 {
        return Err(Error::InvalidParam(format!("supported dimensions are 2 and 3, got {D}")));
    }
    // the speed density mass beyond 8.5 standard deviations is ~1e-14,
    // far below the quadrature tolerance
    let s_max = 8.5 / beta.sqrt();
    let f = move |s: f64| {
        maxwell_speed_density::<D>(beta, s) * angular_mean_relative_speed::<D>(u, s)
    };
    let mean_rel = quad::adaptive(&f, 0.0, s_max, tol::QUAD_RTOL, 1e-14)?;
    Ok(kernel_angular_constant(D) * mean_rel)
}

/// Total jump rate `nu(v)`; depends on `|v|` only.
pub fn total_jump_rate<const D: usize>(v: Vector<D>, beta: f64) -> Result<f64> {
    jump_rate_of_speed::<D>(v.norm(), beta)
}

/// Mean jump rate under the Maxwellian, `E[nu(|v|)]` with `v ~ M_beta`,
/// by adaptive quadrature over the speed distribution.
pub fn mean_jump_rate<const D: usize>(beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParam(format!("need beta > 0, got {beta}")));
    }
    let s_max = 8.5 / beta.sqrt();
    let f = move |s: f64| {
        maxwell_speed_density::<D>(beta, s)
            * jump_rate_of_speed::<D>(s, beta)
                .expect("rate quadrature converges for finite speeds")
    };
    quad::adaptive(&f, 0.0, s_max, 1e-9, 1e-13)
}

/// Mean speed `E|v1|` of the d-dimensional Maxwellian (exact).
fn maxwellian_mean_speed(d: usize, beta: f64) -> f64 {
    (2.0 / beta).sqrt() * libm::tgamma((d as f64 + 1.0) / 2.0) / libm::tgamma(d as f64 / 2.0)
}

fn uniform_direction<const D: usize>(rng: &mut impl Rng) -> Vector<D> {
    loop {
        let mut g = Vector::<D>([0.0; D]);
        let mut n2 = 0.0;
        for a in 0..D {
            let x: f64 = rng.sample(StandardNormal);
            g[a] = x;
            n2 += x * x;
        }
        if n2 > 1e-24 {
            return g * (1.0 / n2.sqrt());
        }
    }
}

/// Draw the post-collision velocity `v' = v - ((v - v1) . omega) omega` with
/// `(v1, omega)` distributed proportionally to `M_beta(v1) ((v - v1) . omega)_+`.
///
/// Rejection sampling with an exact envelope: `v1` is proposed from the
/// mixture `M_beta(v1) (|v| + |v1|) / (|v| + mean speed)` — a plain Maxwellian
/// with probability `|v|/(|v| + mean)`, otherwise a speed-size-biased
/// Maxwellian whose radial law is the norm of a (d+1)-dimensional Gaussian —
/// `omega` uniform, acceptance `((v - v1) . omega)_+ / (|v| + |v1|) <= 1`.
/// The overall acceptance is ~1/pi (d=2) or ~1/4 (d=3) at every speed.
pub fn sample_post_collision<const D: usize>(
    v: Vector<D>,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<Vector<D>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParam(format!("need beta > 0, got {beta}")));
    }
    let speed = v.norm();
    let mean = maxwellian_mean_speed(D, beta);
    const MAX_ATTEMPTS: u64 = 10_000;
    for _ in 0..MAX_ATTEMPTS {
        let v1 = if rng.random::<f64>() * (speed + mean) < speed {
            sample_maxwellian::<D, _>(beta, rng)
        } else {
            let mut ssq = 0.0;
            for _ in 0..=D {
                let g: f64 = rng.sample(StandardNormal);
                ssq += g * g;
            }
            uniform_direction::<D>(rng) * (ssq.sqrt() / beta.sqrt())
        };
        let omega = uniform_direction::<D>(rng);
        let sigma = (v - v1).dot(omega);
        if sigma > 0.0 && rng.random::<f64>() * (speed + v1.norm()) < sigma {
            return Ok(v - omega * sigma);
        }
    }
    Err(Error::EnvelopeMisconfigured {
        acceptance: 1.0 / MAX_ATTEMPTS as f64,
        proposals: MAX_ATTEMPTS,
    })
}

/// One jump of the process: state just before and after, with the position
/// on the torus and its unwrapped copy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JumpEvent<const D: usize> {
    pub time: f64,
    pub position: Vector<D>,
    pub position_unwrapped: Vector<D>,
    pub v_pre: Vector<D>,
    pub v_post: Vector<D>,
}

/// A velocity-jump trajectory: free flight between events.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpTrajectory<const D: usize> {
    pub geom: TorusGeometry<D>,
    pub x0: Vector<D>,
    pub v0: Vector<D>,
    pub t_end: f64,
    pub events: Vec<JumpEvent<D>>,
}

impl<const D: usize> JumpTrajectory<D> {
    pub fn jump_count(&self) -> usize {
        self.events.len()
    }

    /// State (unwrapped position, velocity) at `t` in `[0, t_end]`.
    pub fn state_at(&self, t: f64) -> (Vector<D>, Vector<D>) {
        assert!(
            (0.0..=self.t_end).contains(&t),
            "query time {t} outside [0, {}]",
            self.t_end
        );
        let idx = self.events.partition_point(|e| e.time <= t);
        let (t0, x0, v) = if idx == 0 {
            (0.0, self.x0, self.v0)
        } else {
            let e = &self.events[idx - 1];
            (e.time, e.position_unwrapped, e.v_post)
        };
        (x0 + v * (t - t0), v)
    }

    pub fn velocity_at(&self, t: f64) -> Vector<D> {
        self.state_at(t).1
    }

    pub fn position_unwrapped_at(&self, t: f64) -> Vector<D> {
        self.state_at(t).0
    }

    pub fn position_at(&self, t: f64) -> Vector<D> {
        self.geom.wrap(self.state_at(t).0)
    }
}

enum RateModel {
    /// Cubic interpolation table on [0, cap] plus the large-speed asymptote
    /// `c_d (u + (d-1)/(2 beta u))` beyond; table error < 1e-7 relative.
    Tabulated { values: Vec<f64>, step: f64, cap: f64 },
    /// Diagnostic model with no jumps at all (pure free transport).
    Zero,
}

/// The velocity-jump process: temperature, torus, and a precomputed rate
/// table so each flight segment costs one interpolation.
pub struct JumpProcess<const D: usize> {
    pub beta: f64,
    pub geom: TorusGeometry<D>,
    rate_model: RateModel,
}

const RATE_TABLE_CELLS: usize = 1024;

impl<const D: usize> JumpProcess<D> {
    pub fn new(beta: f64, geom: TorusGeometry<D>) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParam(format!("need beta > 0, got {beta}")));
        }
        let cap = 40.0 / beta.sqrt();
        let step = cap / RATE_TABLE_CELLS as f64;
        let values: Vec<f64> = (0..=RATE_TABLE_CELLS)
            .into_par_iter()
            .map(|i| jump_rate_of_speed::<D>(i as f64 * step, beta))
            .collect::<Result<_>>()?;
        Ok(Self { beta, geom, rate_model: RateModel::Tabulated { values, step, cap } })
    }

    /// A process that never jumps; free transport for diagnostics.
    pub fn with_zero_rate(geom: TorusGeometry<D>) -> Self {
        Self { beta: 1.0, geom, rate_model: RateModel::Zero }
    }

    /// Jump rate at the given speed.
    pub fn rate(&self, speed: f64) -> f64 {
        match &self.rate_model {
            RateModel::Zero => 0.0,
            RateModel::Tabulated { values, step, cap } => {
                if speed >= cap - step {
                    let u = speed;
                    return kernel_angular_constant(D)
                        * (u + (D as f64 - 1.0) / (2.0 * self.beta * u));
                }
                let g = speed / step;
                let k = g.floor() as usize;
                let t = g - k as f64;
                // Catmull-Rom with an even-reflection ghost at u = 0
                // (the rate is an even smooth function of the speed)
                let p0 = if k == 0 { values[1] } else { values[k - 1] };
                let p1 = values[k];
                let p2 = values[k + 1];
                let p3 = values[(k + 2).min(RATE_TABLE_CELLS)];
                0.5 * ((2.0 * p1)
                    + (-p0 + p2) * t
                    + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
                    + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
            }
        }
    }
}

/// Simulate the jump process to `t_end`. The speed is constant during each
/// flight, so the holding time at rate `nu(|v|)` is exactly exponential.
pub fn simulate_jump_process<const D: usize>(
    process: &JumpProcess<D>,
    x0: Vector<D>,
    v0: Vector<D>,
    t_end: f64,
    rng: &mut impl Rng,
) -> Result<JumpTrajectory<D>> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidParam(format!("need finite t_end > 0, got {t_end}")));
    }
    let geom = process.geom;
    let start = geom.wrap(x0);
    let mut xu = start;
    let mut v = v0;
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        let rate = process.rate(v.norm());
        if rate <= f64::MIN_POSITIVE {
            break;
        }
        let dt = -(1.0 - rng.random::<f64>()).ln() / rate;
        if t + dt > t_end {
            break;
        }
        t += dt;
        xu = xu + v * dt;
        let v_post = sample_post_collision(v, process.beta, rng)?;
        events.push(JumpEvent {
            time: t,
            position: geom.wrap(xu),
            position_unwrapped: xu,
            v_pre: v,
            v_post,
        });
        v = v_post;
    }
    Ok(JumpTrajectory { geom, x0: start, v0, t_end, events })
}

/// Uniform Cartesian velocity grid, cutoff `V_max`, spacing `h`, symmetric
/// under `v -> -v`. `mass[i] = weights[i] * M_beta(node_i)` sums to one after
/// renormalization; `raw_mass` records the pre-renormalization sum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityGrid<const D: usize> {
    pub nodes: Vec<Vector<D>>,
    pub weights: Vec<f64>,
    pub mass: Vec<f64>,
    pub h: f64,
    pub v_max: f64,
    pub half_n: usize,
    pub beta: f64,
    pub raw_mass: f64,
}

impl<const D: usize> VelocityGrid<D> {
    /// Default grid: `V_max = 6/sqrt(beta)`, 25 nodes per axis in two
    /// dimensions, 17 per axis in three.
    pub fn new(beta: f64) -> Result<Self> {
        let half_n = match D {
            2 => 12,
            3 => 8,
            _ => {
                return Err(Error::InvalidParam(format!(
                    "supported dimensions are 2 and 3, got {D}"
                )))
            }
        };
        Self::with_cutoff(beta, 6.0 / beta.sqrt(), half_n)
    }

    pub fn with_cutoff(beta: f64, v_max: f64, half_n: usize) -> Result<Self> {
        if !(beta > 0.0) || !(v_max > 0.0) || half_n == 0 {
            return Err(Error::InvalidParam(format!(
                "need beta > 0, v_max > 0, half_n >= 1; got {beta}, {v_max}, {half_n}"
            )));
        }
        let h = v_max / half_n as f64;
        let axis = 2 * half_n + 1;
        let n = axis.pow(D as u32);
        let mut nodes = Vec::with_capacity(n);
        for flat in 0..n {
            let mut v = Vector::<D>([0.0; D]);
            let mut rem = flat;
            for a in (0..D).rev() {
                let m = rem % axis;
                rem /= axis;
                v[a] = (m as f64 - half_n as f64) * h;
            }
            nodes.push(v);
        }
        let cell = h.powi(D as i32);
        let raw_mass: f64 = nodes.iter().map(|&v| cell * maxwellian_density::<D>(beta, v)).sum();
        let weights: Vec<f64> = vec![cell / raw_mass; n];
        let mass: Vec<f64> =
            nodes.iter().map(|&v| cell / raw_mass * maxwellian_density::<D>(beta, v)).collect();
        Ok(Self { nodes, weights, mass, h, v_max, half_n, beta, raw_mass })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn axis(&self) -> usize {
        2 * self.half_n + 1
    }

    /// Index of the node at `-v` given the index of the node at `v`.
    pub fn reflect_index(&self, i: usize) -> usize {
        let axis = self.axis();
        let mut rem = i;
        let mut out = 0;
        for _ in 0..D {
            let m = rem % axis;
            rem /= axis;
            out = out * axis + (axis - 1 - m);
        }
        // out was accumulated in reversed axis order; reverse back
        let mut digits = [0usize; 8];
        let mut tmp = out;
        for a in 0..D {
            digits[a] = tmp % axis;
            tmp /= axis;
        }
        let mut flat = 0;
        for a in 0..D {
            flat = flat * axis + digits[a];
        }
        flat
    }

    /// Multilinear interpolation stencil for `v`: up to 2^D (node, weight)
    /// pairs with nonnegative weights summing to one, or None outside the
    /// grid hull.
    fn stencil(&self, v: Vector<D>) -> Option<([(usize, f64); 8], usize)> {
        let axis = self.axis();
        let mut cell = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for a in 0..D {
            let g = v[a] / self.h + self.half_n as f64;
            if !(0.0..=(axis - 1) as f64).contains(&g) {
                return None;
            }
            let c = (g.floor() as usize).min(axis - 2);
            cell[a] = c;
            frac[a] = g - c as f64;
        }
        let mut out = [(0usize, 0.0f64); 8];
        let corners = 1usize << D;
        for corner in 0..corners {
            let mut flat = 0;
            let mut w = 1.0;
            for a in 0..D {
                let up = (corner >> a) & 1;
                flat = flat * axis + cell[a] + up;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            out[corner] = (flat, w);
        }
        Some((out, corners))
    }

    /// Interpolate grid samples of a function at `v`; None outside the grid.
    pub fn interpolate(&self, phi: &[f64], v: Vector<D>) -> Option<f64> {
        let (stencil, m) = self.stencil(v)?;
        Some(stencil[..m].iter().map(|&(idx, w)| w * phi[idx]).sum())
    }
}

/// Maxwellian-weighted inner product of grid functions.
pub fn weighted_dot<const D: usize>(grid: &VelocityGrid<D>, a: &[f64], b: &[f64]) -> f64 {
    grid.mass.iter().zip(a).zip(b).map(|((&m, &x), &y)| m * x * y).sum()
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton iteration on the
/// Legendre recurrence).
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = (PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = if n >= 1 { n as f64 * (x * p1 - p0) / (x * x - 1.0) } else { 0.0 };
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Quadrature directions and weights on the unit sphere, symmetric under
/// `omega -> -omega`: uniform angles in two dimensions (spectrally accurate
/// for periodic integrands), Gauss-Legendre in the polar cosine times a
/// uniform azimuth in three.
fn angular_set<const D: usize>(order: usize) -> Result<Vec<(Vector<D>, f64)>> {
    if order < 4 || order % 2 != 0 {
        return Err(Error::InvalidParam(format!(
            "angular order must be even and at least 4, got {order}"
        )));
    }
    let mut out = Vec::new();
    match D {
        2 => {
            for q in 0..order {
                let th = 2.0 * PI * (q as f64 + 0.5) / order as f64;
                let mut w = Vector::<D>([0.0; D]);
                w[0] = th.cos();
                w[1] = th.sin();
                out.push((w, 2.0 * PI / order as f64));
            }
        }
        3 => {
            let polar = gauss_legendre(order / 2);
            for &(c, gw) in &polar {
                let s = (1.0 - c * c).max(0.0).sqrt();
                for m in 0..order {
                    let ph = 2.0 * PI * (m as f64 + 0.5) / order as f64;
                    let mut w = Vector::<D>([0.0; D]);
                    w[0] = s * ph.cos();
                    w[1] = s * ph.sin();
                    w[2] = c;
                    out.push((w, gw * 2.0 * PI / order as f64));
                }
            }
        }
        _ => {
            return Err(Error::InvalidParam(format!("supported dimensions are 2 and 3, got {D}")))
        }
    }
    Ok(out)
}

/// Dense discretized generator on a velocity grid.
#[derive(Clone, Debug)]
pub struct OperatorL<const D: usize> {
    /// Row-major `n x n`; acts on grid samples of a function of velocity.
    pub matrix: Vec<f64>,
    pub n: usize,
    pub beta: f64,
    pub angular_order: usize,
    pub grid: VelocityGrid<D>,
    /// Maxwellian-weighted fraction of scattered mass that fell outside the
    /// grid and was dropped (before the conservative correction).
    pub truncation_mass: f64,
    /// Relative asymmetry of the weighted operator before symmetrization
    /// (a discretization-quality diagnostic; the stored matrix is exact).
    pub raw_asymmetry: f64,
}

impl<const D: usize> OperatorL<D> {
    /// Relaxation-time model on the same grid: `L phi = -nu0 (phi - <phi>)`
    /// with the Maxwellian-weighted average. Shares all structural
    /// properties of the assembled operator and has closed-form inverses,
    /// so it serves as an exact cross-check for spectral solvers.
    pub fn relaxation(grid: &VelocityGrid<D>, nu0: f64) -> Result<Self> {
        if !(nu0 > 0.0) {
            return Err(Error::InvalidParam(format!("need nu0 > 0, got {nu0}")));
        }
        let n = grid.len();
        let mut matrix = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                matrix[i * n + j] = -nu0 * (delta - grid.mass[j]);
            }
        }
        Ok(Self {
            matrix,
            n,
            beta: grid.beta,
            angular_order: 0,
            grid: grid.clone(),
            truncation_mass: 0.0,
            raw_asymmetry: 0.0,
        })
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.n);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.matrix[i * self.n..(i + 1) * self.n];
            out[i] = row.iter().zip(phi).map(|(&a, &x)| a * x).sum();
        }
        out
    }

    /// The loss rate encoded on the diagonal (approximates the jump rate at
    /// the node as the grid refines).
    pub fn rate_diagonal(&self, i: usize) -> f64 {
        -self.matrix[i * self.n + i]
    }
}

/// Assemble the dense generator on the grid. Gain terms whose post-collision
/// velocity falls outside the grid are dropped into a Maxwellian-weighted
/// truncation diagnostic; exceeding the tolerance is an error ("grid too
/// small"). After assembly the matrix is symmetrized in the weighted inner
/// product and the diagonal is projected so that constants are annihilated
/// exactly.
#[allow(non_snake_case)]
pub fn assemble_L<const D: usize>(
    grid: &VelocityGrid<D>,
    beta: f64,
    angular_order: usize,
) -> Result<OperatorL<D>> {
    if (beta - grid.beta).abs() > 1e-12 * beta.abs() {
        return Err(Error::InvalidParam(format!(
            "operator beta {beta} does not match grid beta {}",
            grid.beta
        )));
    }
    let total_mass: f64 = grid.mass.iter().sum();
    if (total_mass - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParam(format!(
            "grid reference masses sum to {total_mass}, expected 1 within 1e-6"
        )));
    }
    let dirs = angular_set::<D>(angular_order)?;
    let n = grid.len();

    struct Row {
        gains: Vec<f64>,
        loss: f64,
        dropped: f64,
    }
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vi = grid.nodes[i];
            let mut gains = vec![0.0f64; n];
            let mut loss = 0.0;
            let mut dropped = 0.0;
            for (j, &vj) in grid.nodes.iter().enumerate() {
                let mj = grid.mass[j];
                let w = vi - vj;
                for &(omega, aw) in &dirs {
                    let sigma = w.dot(omega);
                    if sigma <= 0.0 {
                        continue;
                    }
                    let r = mj * sigma * aw;
                    loss += r;
                    match grid.stencil(vi - omega * sigma) {
                        Some((stencil, m)) => {
                            for &(idx, c) in &stencil[..m] {
                                gains[idx] += r * c;
                            }
                        }
                        None => dropped += r,
                    }
                }
            }
            Row { gains, loss, dropped }
        })
        .collect();

    let dropped_weighted: f64 = rows.iter().zip(&grid.mass).map(|(r, &m)| m * r.dropped).sum();
    let loss_weighted: f64 = rows.iter().zip(&grid.mass).map(|(r, &m)| m * r.loss).sum();
    let truncation_mass = if loss_weighted > 0.0 { dropped_weighted / loss_weighted } else { 0.0 };
    if truncation_mass > tol::GRID_TRUNCATION_MAX {
        return Err(Error::GridTruncation { lost: truncation_mass });
    }

    // raw matrix: gains off the loss diagonal
    let mut matrix = vec![0.0f64; n * n];
    for (i, row) in rows.iter().enumerate() {
        let out = &mut matrix[i * n..(i + 1) * n];
        out.copy_from_slice(&row.gains);
        out[i] -= row.loss;
    }

    // symmetrize in the weighted inner product; record how asymmetric the
    // raw discretization was
    let mut raw_asym = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let a_ij = grid.mass[i] * matrix[i * n + j];
            let a_ji = grid.mass[j] * matrix[j * n + i];
            raw_asym = raw_asym.max((a_ij - a_ji).abs());
            scale = scale.max(a_ij.abs().max(a_ji.abs()));
            let sym = 0.5 * (a_ij + a_ji);
            matrix[i * n + j] = sym / grid.mass[i];
            matrix[j * n + i] = sym / grid.mass[j];
        }
    }
    let raw_asymmetry = if scale > 0.0 { raw_asym / scale } else { 0.0 };

    // conservative correction: constants are annihilated exactly
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if j != i {
                off += matrix[i * n + j];
            }
        }
        matrix[i * n + i] = -off;
    }

    Ok(OperatorL {
        matrix,
        n,
        beta,
        angular_order,
        grid: grid.clone(),
        truncation_mass,
        raw_asymmetry,
    })
}

/// Histogram-based relative entropy of a velocity ensemble against the
/// Maxwellian.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    /// True when empty bins forced additive smoothing of the counts.
    pub smoothed: bool,
    pub bins_per_axis: usize,
    pub samples: usize,
}

/// Estimate `KL(ensemble || M_beta)` from product bins with unbounded edge
/// bins (reference masses from the Gaussian CDF, so every bin has positive
/// reference mass). Requires at least 10^4 samples. When some bins are
/// empty, additive smoothing with one pseudo-count spread over all bins is
/// applied and flagged; the Miller-Madow correction is applied either way.
pub fn relative_entropy_monitor<const D: usize>(
    velocities: &[Vector<D>],
    beta: f64,
) -> Result<EntropyEstimate> {
    if velocities.len() < 10_000 {
        return Err(Error::TooShort(format!(
            "ensemble of {} velocities; the entropy monitor needs at least 10000",
            velocities.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParam(format!("need beta > 0, got {beta}")));
    }
    let bins = match D {
        2 => 24,
        3 => 12,
        _ => return Err(Error::InvalidParam(format!("supported dimensions are 2 and 3, got {D}"))),
    };
    let lim = 5.5 / beta.sqrt();
    let width = 2.0 * lim / bins as f64;
    // per-axis reference masses; outer bins absorb the tails
    let mut axis_mass = vec![0.0f64; bins];
    for (k, am) in axis_mass.iter_mut().enumerate() {
        let lo = if k == 0 { f64::NEG_INFINITY } else { -lim + k as f64 * width };
        let hi = if k == bins - 1 { f64::INFINITY } else { -lim + (k + 1) as f64 * width };
        let cdf = |x: f64| {
            if x.is_infinite() {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                stats::normal_cdf(beta.sqrt() * x)
            }
        };
        *am = cdf(hi) - cdf(lo);
    }
    let k_total = bins.pow(D as u32);
    let mut q = vec![1.0f64; k_total];
    for (flat, qk) in q.iter_mut().enumerate() {
        let mut rem = flat;
        for _ in 0..D {
            *qk *= axis_mass[rem % bins];
            rem /= bins;
        }
    }
    let mut counts = vec![0u64; k_total];
    for v in velocities {
        let mut flat = 0;
        for a in (0..D).rev() {
            let k = (((v[a] + lim) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
            flat = flat * bins + k;
        }
        counts[flat] += 1;
    }
    let n = velocities.len() as f64;
    let occupied = counts.iter().filter(|&&c| c > 0).count();
    let smoothed = counts.iter().any(|&c| c == 0);
    let value = if smoothed {
        // one pseudo-count spread over all bins keeps the bias far below the
        // estimator noise while making every probability positive
        let alpha = 1.0 / k_total as f64;
        let total = n + 1.0;
        let kl: f64 = counts
            .iter()
            .zip(&q)
            .map(|(&c, &qk)| {
                let p = (c as f64 + alpha) / total;
                p * (p / qk).ln()
            })
            .sum();
        kl - (occupied as f64 - 1.0) / (2.0 * n)
    } else {
        stats::kl_divergence_binned(&counts, &q)
    };
    Ok(EntropyEstimate { value, smoothed, bins_per_axis: bins, samples: velocities.len() })
}

/// Serialize an operator: little-endian header (u32 dimension, u32 angular
/// order, f64 grid spacing, f64 cutoff, f64 beta) followed by the row-major
/// matrix as f64. Assembly-time diagnostics are not persisted.
pub fn write_operator<const D: usize>(op: &OperatorL<D>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(D as u32).to_le_bytes())?;
    w.write_all(&(op.angular_order as u32).to_le_bytes())?;
    w.write_all(&op.grid.h.to_le_bytes())?;
    w.write_all(&op.grid.v_max.to_le_bytes())?;
    w.write_all(&op.beta.to_le_bytes())?;
    for x in &op.matrix {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_operator<const D: usize>(path: impl AsRef<Path>) -> Result<OperatorL<D>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header = 4 + 4 + 8 + 8 + 8;
    if bytes.len() < header {
        return Err(Error::Parse("operator file shorter than its header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let d = u32_at(0) as usize;
    if d != D {
        return Err(Error::Parse(format!("operator file is {d}-dimensional, expected {D}")));
    }
    let angular_order = u32_at(4) as usize;
    let h = f64_at(8);
    let v_max = f64_at(16);
    let beta = f64_at(24);
    let half_n = (v_max / h).round() as usize;
    let grid = VelocityGrid::<D>::with_cutoff(beta, v_max, half_n)?;
    let n = grid.len();
    if bytes.len() != header + 8 * n * n {
        return Err(Error::Parse(format!(
            "operator file has {} bytes, expected {} for a {n}x{n} matrix",
            bytes.len(),
            header + 8 * n * n
        )));
    }
    let matrix: Vec<f64> =
        (0..n * n).map(|k| f64_at(header + 8 * k)).collect();
    Ok(OperatorL { matrix, n, beta, angular_order, grid, truncation_mass: 0.0, raw_asymmetry: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn shared_operator() -> &'static OperatorL<2> {
        static OP: OnceLock<OperatorL<2>> = OnceLock::new();
        OP.get_or_init(|| {
            let grid = VelocityGrid::<2>::new(1.0).unwrap();
            assemble_L(&grid, 1.0, 32).unwrap()
        })
    }

    #[test]
    fn rate_at_rest_matches_the_mean_speed_oracle() {
        // d=2, beta=1: nu(0) = 2 E|v1| = 2 sqrt(pi/2); the oracle recomputes
        // the mean speed by an independent one-dimensional quadrature
        let nu0 = jump_rate_of_speed::<2>(0.0, 1.0).unwrap();
        let oracle = 2.0
            * quad::adaptive(&|s: f64| s * s * (-0.5 * s * s).exp(), 0.0, 9.0, 1e-12, 1e-15)
                .unwrap();
        assert!((nu0 - oracle).abs() < 1e-9 * oracle);
        assert!((nu0 - 2.0 * (PI / 2.0).sqrt()).abs() < 1e-9, "nu(0) = {nu0}");

        // d=3, beta=1: nu(0) = pi E|v1| = 2 sqrt(2 pi)
        let nu0_3 = jump_rate_of_speed::<3>(0.0, 1.0).unwrap();
        assert!((nu0_3 - 2.0 * (2.0 * PI).sqrt()).abs() < 1e-8, "nu(0) = {nu0_3}");

        // scaling in beta: nu scales like 1/sqrt(beta)
        let nu0_b4 = jump_rate_of_speed::<2>(0.0, 4.0).unwrap();
        assert!((nu0_b4 - nu0 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn rate_approaches_the_ballistic_asymptote_at_large_speed() {
        // nu(u)/u -> c_d within 1% at u = 20/sqrt(beta)
        let u = 20.0;
        let r2 = jump_rate_of_speed::<2>(u, 1.0).unwrap();
        assert!((r2 / (2.0 * u) - 1.0).abs() < 0.01, "d=2 ratio {}", r2 / (2.0 * u));
        let r3 = jump_rate_of_speed::<3>(u, 1.0).unwrap();
        assert!((r3 / (PI * u) - 1.0).abs() < 0.01, "d=3 ratio {}", r3 / (PI * u));
    }

    #[test]
    fn rate_is_strictly_increasing_in_speed() {
        for beta in [1.0, 2.0] {
            let mut prev2 = -1.0;
            let mut prev3 = -1.0;
            for k in 0..=10 {
                let u = 0.5 * k as f64;
                let r2 = jump_rate_of_speed::<2>(u, beta).unwrap();
                let r3 = jump_rate_of_speed::<3>(u, beta).unwrap();
                assert!(r2 > prev2, "d=2 rate not increasing at u={u}");
                assert!(r3 > prev3, "d=3 rate not increasing at u={u}");
                prev2 = r2;
                prev3 = r3;
            }
        }
    }

    #[test]
    fn rate_table_matches_direct_quadrature() {
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let process = JumpProcess::<2>::new(1.0, geom).unwrap();
        for u in [0.0, 0.05, 0.31, 1.13, 2.71, 5.9, 17.3, 39.0] {
            let direct = jump_rate_of_speed::<2>(u, 1.0).unwrap();
            let table = process.rate(u);
            assert!(
                (table - direct).abs() < 1e-5 * direct.max(1.0),
                "u={u}: table {table} vs direct {direct}"
            );
        }
        // beyond the table: asymptotic form, still accurate
        let far = process.rate(60.0);
        let direct = jump_rate_of_speed::<2>(60.0, 1.0).unwrap();
        assert!((far - direct).abs() < 1e-5 * direct);
    }

    #[test]
    fn post_collision_sheds_energy_from_fast_particles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Vector::<2>([4.0, 0.0]);
        let m = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..m {
            let e = sample_post_collision(v, 1.0, &mut rng).unwrap().norm_sq();
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / m as f64;
        let se = ((sum_sq / m as f64 - mean * mean) / m as f64).sqrt();
        assert!(mean + 3.0 * se < v.norm_sq(), "mean post energy {mean} (se {se})");
    }

    #[test]
    fn post_collision_is_isotropic_at_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Vector::<2>([0.0, 0.0]);
        let angles: Vec<f64> = (0..4000)
            .map(|_| {
                let vp = sample_post_collision(v, 1.0, &mut rng).unwrap();
                vp[1].atan2(vp[0])
            })
            .collect();
        let ks = stats::ks_test_cdf(&angles, |a| (a + PI) / (2.0 * PI));
        assert!(ks.p_value > 0.01, "angular KS p = {}", ks.p_value);
    }

    #[test]
    fn time_marginal_of_the_jump_process_is_maxwellian() {
        // stationarity / detailed balance: over 1e5 jumps the time-sampled
        // velocity marginal matches M_beta (post-jump states alone would be
        // speed-size-biased, so sampling is uniform in time)
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let process = JumpProcess::<2>::new(1.0, geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v0 = sample_maxwellian::<2, _>(1.0, &mut rng);
        let t_end = 28_500.0;
        let traj =
            simulate_jump_process(&process, Vector::<2>([0.5, 0.5]), v0, t_end, &mut rng).unwrap();
        assert!(traj.jump_count() > 100_000, "jumps: {}", traj.jump_count());
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut t = 1.0;
        while t < t_end {
            let v = traj.velocity_at(t);
            xs.push(v[0]);
            ys.push(v[1]);
            t += 2.0;
        }
        for (label, coords) in [("x", &xs), ("y", &ys)] {
            let ks = stats::ks_test_cdf(coords, |x| stats::normal_cdf(x));
            assert!(ks.p_value > 0.01, "{label}-marginal KS p = {}", ks.p_value);
        }
    }

    #[test]
    fn zero_rate_process_is_pure_free_flight() {
        let geom = TorusGeometry::<2>::new(3.0).unwrap();
        let process = JumpProcess::<2>::with_zero_rate(geom);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Vector::<2>([1.0, 2.5]);
        let v0 = Vector::<2>([0.7, -0.3]);
        let traj = simulate_jump_process(&process, x0, v0, 10.0, &mut rng).unwrap();
        assert_eq!(traj.jump_count(), 0);
        let (xu, v) = traj.state_at(10.0);
        let expect = x0 + v0 * 10.0;
        assert_eq!(xu[0].to_bits(), expect[0].to_bits());
        assert_eq!(xu[1].to_bits(), expect[1].to_bits());
        assert_eq!(v[0].to_bits(), v0[0].to_bits());
        // the torus copy is the wrapped unwrapped position
        let wrapped = traj.position_at(10.0);
        assert!(geom.distance(wrapped, geom.wrap(expect)) < 1e-12);
    }

    #[test]
    fn jump_count_matches_the_mean_rate_quadrature() {
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let process = JumpProcess::<2>::new(1.0, geom).unwrap();
        let expected_rate = mean_jump_rate::<2>(1.0).unwrap();
        // independent closed form: relative speed of two Maxwellians is a
        // Maxwellian at beta/2, so E[nu] = 2 sqrt(pi/beta)
        assert!((expected_rate - 2.0 * PI.sqrt()).abs() < 1e-7, "mean rate {expected_rate}");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v0 = sample_maxwellian::<2, _>(1.0, &mut rng);
        let t_end = 3000.0;
        let traj =
            simulate_jump_process(&process, Vector::<2>([0.1, 0.9]), v0, t_end, &mut rng).unwrap();
        let empirical = traj.jump_count() as f64 / t_end;
        assert!(
            (empirical / expected_rate - 1.0).abs() < 0.03,
            "empirical {empirical} vs expected {expected_rate}"
        );
        // free flight between events: reconstruct each event position from
        // the previous one
        let mut t_prev = 0.0;
        let mut x_prev = traj.x0;
        let mut v_prev = traj.v0;
        for e in traj.events.iter().take(1000) {
            let free = x_prev + v_prev * (e.time - t_prev);
            assert!((free - e.position_unwrapped).norm() < 1e-9);
            assert!(e.v_pre.norm().is_finite() && e.v_post.norm().is_finite());
            t_prev = e.time;
            x_prev = e.position_unwrapped;
            v_prev = e.v_post;
        }
    }

    #[test]
    fn velocity_autocorrelation_decays_and_its_integral_stabilizes() {
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let process = JumpProcess::<2>::new(1.0, geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v0 = sample_maxwellian::<2, _>(1.0, &mut rng);
        let t_end = 4000.0;
        let traj =
            simulate_jump_process(&process, Vector::<2>([0.2, 0.8]), v0, t_end, &mut rng).unwrap();
        let dt = 0.1;
        let samples: Vec<Vector<2>> = (0..(t_end / dt) as usize - 1)
            .map(|k| traj.velocity_at(k as f64 * dt))
            .collect();
        let vacf = |range: std::ops::Range<usize>, lag: usize| -> f64 {
            let m = range.len() - lag;
            range.take(m).map(|k| samples[k].dot(samples[k + lag])).sum::<f64>() / m as f64
        };
        let half = samples.len() / 2;
        let c0 = vacf(0..samples.len(), 0);
        assert!((c0 - 2.0).abs() < 0.15, "C(0) = {c0}, want d/beta = 2");
        // 5 mean free times is lag 14 at this sampling; well into the decay
        let c_late = vacf(0..samples.len(), 14);
        assert!(c_late.abs() < 0.2 * c0, "C(5 mft) = {c_late} vs C(0) = {c0}");
        let max_lag = 60; // ~21 mean free times
        let integral = |range: std::ops::Range<usize>| -> f64 {
            (0..max_lag).map(|lag| vacf(range.clone(), lag) * dt).sum()
        };
        let full = integral(0..samples.len());
        let first_half = integral(0..half);
        assert!(
            (full - first_half).abs() < 0.1 * full.abs() + 0.01,
            "integral {full} vs first half {first_half}"
        );
    }

    #[test]
    fn velocity_grid_is_symmetric_and_normalized() {
        let grid2 = VelocityGrid::<2>::new(1.0).unwrap();
        assert_eq!(grid2.axis(), 25);
        assert_eq!(grid2.len(), 625);
        let grid3 = VelocityGrid::<3>::new(1.0).unwrap();
        assert_eq!(grid3.axis(), 17);
        assert_eq!(grid3.len(), 4913);
        for grid in [&grid2] {
            let total: f64 = grid.mass.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "renormalized mass {total}");
            assert!((grid.raw_mass - 1.0).abs() < 1e-6, "raw mass {}", grid.raw_mass);
            for i in 0..grid.len() {
                let r = grid.reflect_index(i);
                let flipped = grid.nodes[i] * -1.0;
                assert!((grid.nodes[r] - flipped).norm() == 0.0);
                assert_eq!(grid.weights[i], grid.weights[r]);
            }
        }
        let t3: f64 = grid3.mass.iter().sum();
        assert!((t3 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_interpolation_is_exact_on_affine_functions() {
        let grid = VelocityGrid::<2>::new(1.0).unwrap();
        let phi: Vec<f64> = grid.nodes.iter().map(|v| 0.7 * v[0] - 1.3 * v[1] + 0.4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = Vector::<2>([
                (rng.random::<f64>() - 0.5) * 2.0 * grid.v_max,
                (rng.random::<f64>() - 0.5) * 2.0 * grid.v_max,
            ]);
            let got = grid.interpolate(&phi, v).unwrap();
            let want = 0.7 * v[0] - 1.3 * v[1] + 0.4;
            assert!((got - want).abs() < 1e-12);
        }
        // outside the hull: no value
        assert!(grid.interpolate(&phi, Vector::<2>([grid.v_max * 1.01, 0.0])).is_none());
    }

    #[test]
    fn operator_annihilates_constants() {
        let op = shared_operator();
        let ones = vec![1.0; op.n];
        let image = op.apply(&ones);
        let scale = (0..op.n).map(|i| op.rate_diagonal(i).abs()).fold(0.0, f64::max);
        let worst = image.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(worst <= 1e-10 * scale, "max |L 1| = {worst}, rate scale {scale}");
    }

    #[test]
    fn operator_is_self_adjoint_in_the_weighted_inner_product() {
        let op = shared_operator();
        // raw discretization asymmetry is a small interpolation artifact...
        assert!(op.raw_asymmetry < 0.05, "raw asymmetry {}", op.raw_asymmetry);
        // ...and the stored matrix is weighted-symmetric to roundoff
        let n = op.n;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let a_ij = op.grid.mass[i] * op.matrix[i * n + j];
                let a_ji = op.grid.mass[j] * op.matrix[j * n + i];
                worst = worst.max((a_ij - a_ji).abs());
                scale = scale.max(a_ij.abs());
            }
        }
        assert!(worst <= 1e-8 * scale, "asymmetry {worst} at scale {scale}");
        // cross-check with random functions: <phi, L psi> = <L phi, psi>
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let phi: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let psi: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let a = weighted_dot(&op.grid, &phi, &op.apply(&psi));
            let b = weighted_dot(&op.grid, &op.apply(&phi), &psi);
            assert!((a - b).abs() < 1e-10 * a.abs().max(b.abs()).max(1e-3));
        }
    }

    #[test]
    fn operator_is_dissipative_on_random_functions() {
        let op = shared_operator();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let phi: Vec<f64> = (0..op.n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let d = weighted_dot(&op.grid, &phi, &op.apply(&phi));
            let norm = weighted_dot(&op.grid, &phi, &phi);
            assert!(d <= 1e-12 * norm.max(1.0), "<phi, L phi> = {d}");
        }
    }

    #[test]
    fn operator_commutes_with_velocity_reflection() {
        let op = shared_operator();
        let n = op.n;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            let ri = op.grid.reflect_index(i);
            for j in 0..n {
                let rj = op.grid.reflect_index(j);
                let diff = (op.matrix[i * n + j] - op.matrix[ri * n + rj]).abs();
                worst = worst.max(diff);
                scale = scale.max(op.matrix[i * n + j].abs());
            }
        }
        assert!(worst <= 1e-10 * scale, "reflection asymmetry {worst} at scale {scale}");
    }

    #[test]
    fn rate_diagonal_converges_to_the_jump_rate_with_order_at_least_one() {
        let beta = 1.0;
        let coarse_grid = VelocityGrid::<2>::with_cutoff(beta, 6.0, 6).unwrap();
        let coarse = assemble_L(&coarse_grid, beta, 32).unwrap();
        let fine = shared_operator(); // half_n = 12, same cutoff
        // compare at shared interior nodes (coarse nodes are a subset of
        // fine nodes since the spacing exactly halves)
        let mut err_coarse = 0.0f64;
        let mut err_fine = 0.0f64;
        for &(kx, ky) in &[(0i64, 0i64), (1, 0), (0, 1), (1, 1), (2, 1)] {
            let v = Vector::<2>([kx as f64 * coarse_grid.h, ky as f64 * coarse_grid.h]);
            let exact = total_jump_rate(v, beta).unwrap();
            // the last axis varies fastest in the node layout
            let ci = ((kx + 6) * 13 + (ky + 6)) as usize;
            let fi = ((2 * kx + 12) * 25 + (2 * ky + 12)) as usize;
            assert!((coarse.grid.nodes[ci] - v).norm() < 1e-12);
            assert!((fine.grid.nodes[fi] - v).norm() < 1e-12);
            err_coarse = err_coarse.max((coarse.rate_diagonal(ci) - exact).abs() / exact);
            err_fine = err_fine.max((fine.rate_diagonal(fi) - exact).abs() / exact);
        }
        let order = (err_coarse / err_fine).log2();
        assert!(
            order >= 0.9,
            "observed order {order} (coarse err {err_coarse}, fine err {err_fine})"
        );
    }

    #[test]
    fn undersized_grid_is_rejected_with_a_truncation_error() {
        // a cutoff below ~2 standard deviations scatters visible Maxwellian
        // mass outside the grid
        let grid = VelocityGrid::<2>::with_cutoff(1.0, 1.5, 6).unwrap();
        match assemble_L(&grid, 1.0, 16) {
            Err(Error::GridTruncation { lost }) => assert!(lost > 1e-3),
            other => panic!("expected a truncation error, got {other:?}"),
        }
    }

    #[test]
    fn three_dimensional_operator_passes_the_structural_checks() {
        let grid = VelocityGrid::<3>::with_cutoff(1.0, 6.0, 4).unwrap();
        let op = assemble_L(&grid, 1.0, 8).unwrap();
        let ones = vec![1.0; op.n];
        let worst = op.apply(&ones).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = (0..op.n).map(|i| op.rate_diagonal(i).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10 * scale);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let phi: Vec<f64> = (0..op.n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let d = weighted_dot(&op.grid, &phi, &op.apply(&phi));
            assert!(d <= 1e-12 * weighted_dot(&op.grid, &phi, &phi).max(1.0));
        }
        // the diagonal rate at the origin is biased low on a coarse grid
        // (scattered mass landing in the node's own stencil neighborhood
        // cancels loss) but converges to nu(0) under refinement
        let exact = jump_rate_of_speed::<3>(0.0, 1.0).unwrap();
        let center = op.n / 2;
        assert!((op.grid.nodes[center]).norm() == 0.0);
        let err_coarse = (op.rate_diagonal(center) - exact).abs();
        let finer_grid = VelocityGrid::<3>::with_cutoff(1.0, 6.0, 6).unwrap();
        let finer = assemble_L(&finer_grid, 1.0, 8).unwrap();
        let fcenter = finer.n / 2;
        assert!((finer.grid.nodes[fcenter]).norm() == 0.0);
        let err_fine = (finer.rate_diagonal(fcenter) - exact).abs();
        assert!(
            err_fine < err_coarse / 1.4,
            "diagonal rate error did not shrink under refinement: {err_coarse} -> {err_fine} \
             (nu(0) = {exact})"
        );
    }

    #[test]
    fn operator_round_trips_through_the_binary_format() {
        let op = shared_operator();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("operator.bin");
        write_operator(op, &path).unwrap();
        let back = read_operator::<2>(&path).unwrap();
        assert_eq!(back.n, op.n);
        assert_eq!(back.beta, op.beta);
        assert_eq!(back.angular_order, op.angular_order);
        assert_eq!(back.grid.h, op.grid.h);
        assert_eq!(back.grid.v_max, op.grid.v_max);
        for (a, b) in back.matrix.iter().zip(&op.matrix) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // wrong dimension is refused
        assert!(read_operator::<3>(&path).is_err());
    }

    #[test]
    fn entropy_of_a_maxwellian_ensemble_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ens: Vec<Vector<2>> = (0..20_000).map(|_| sample_maxwellian(1.0, &mut rng)).collect();
        let est = relative_entropy_monitor(&ens, 1.0).unwrap();
        assert!(est.value.abs() < 0.05, "entropy {}", est.value);
        // too-small ensembles are refused
        assert!(matches!(
            relative_entropy_monitor(&ens[..5000], 1.0),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn entropy_of_a_shifted_ensemble_matches_the_gaussian_divergence() {
        // KL(N(u, 1/beta) || N(0, 1/beta)) = beta |u|^2 / 2
        let beta = 1.0;
        let u = Vector::<2>([0.8, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ens: Vec<Vector<2>> =
            (0..40_000).map(|_| sample_maxwellian(beta, &mut rng) + u).collect();
        let est = relative_entropy_monitor(&ens, beta).unwrap();
        let exact = beta * u.norm_sq() / 2.0;
        assert!(
            (est.value - exact).abs() < 0.1 * exact,
            "entropy {} vs exact {exact}",
            est.value
        );
    }

    #[test]
    fn entropy_is_nonincreasing_along_the_jump_process() {
        let beta = 1.0;
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let process = JumpProcess::<2>::new(beta, geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shift = Vector::<2>([1.2, 0.0]);
        let n_ens = 20_000;
        let checkpoints = [0.0, 0.3, 0.8, 2.0];
        let trajectories: Vec<JumpTrajectory<2>> = (0..n_ens)
            .map(|_| {
                let v0 = sample_maxwellian::<2, _>(beta, &mut rng) + shift;
                simulate_jump_process(&process, Vector::<2>([0.5, 0.5]), v0, 2.0, &mut rng)
                    .unwrap()
            })
            .collect();
        let mut values = Vec::new();
        for &t in &checkpoints {
            let ens: Vec<Vector<2>> = trajectories.iter().map(|tr| tr.velocity_at(t)).collect();
            values.push(relative_entropy_monitor(&ens, beta).unwrap().value);
        }
        let exact0 = beta * shift.norm_sq() / 2.0;
        assert!((values[0] - exact0).abs() < 0.1 * exact0, "H(0) = {} vs {exact0}", values[0]);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 0.012, "entropy increased: {values:?}");
        }
        assert!(values[3] < 0.3 * values[0], "relaxation too slow: {values:?}");
    }
}
