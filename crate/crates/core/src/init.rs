//! Initial-condition sampling: hard-core gas configurations drawn uniformly
//! from the exclusion domain, Maxwellian velocities, and a reweighted law for
//! the tagged particle.
//!
//! The tagged particle is always index 0. Its initial law is specified as a
//! density *relative to* the equilibrium one-particle law (uniform position on
//! the torus times Maxwellian velocity): a bounded weight w(x, v) with
//! equilibrium mean 1 and sup bound mu. Rejection sampling against the
//! equilibrium proposal then accepts with probability w/mu, so the expected
//! acceptance rate is exactly 1/mu.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TorusGeometry, Vector};
use crate::quad;
use crate::tol;

/// Physical and sampling parameters of one gas realization.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GasParameters<const D: usize> {
    /// Number of spheres.
    pub n: usize,
    /// Sphere diameter: two centers collide at separation `eps`.
    pub eps: f64,
    pub geom: TorusGeometry<D>,
    /// Inverse temperature of the velocity Maxwellian.
    pub beta: f64,
    pub seed: u64,
}

impl<const D: usize> GasParameters<D> {
    pub fn new(n: usize, eps: f64, side: f64, beta: f64, seed: u64) -> Result<Self> {
        let geom = TorusGeometry::new(side)?;
        if n == 0 {
            return Err(Error::InvalidParam("need at least one particle".into()));
        }
        if !(eps > 0.0) || !(eps < side / 4.0) {
            return Err(Error::InvalidParam(format!(
                "sphere diameter {eps} must lie in (0, side/4 = {})",
                side / 4.0
            )));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParam(format!("beta {beta} must be positive")));
        }
        let p = Self { n, eps, geom, beta, seed };
        if p.packing_fraction() >= 0.3 {
            return Err(Error::InvalidParam(format!(
                "packing fraction {:.3} >= 0.3; sampler is not built for dense gases",
                p.packing_fraction()
            )));
        }
        Ok(p)
    }

    /// Parameters at the low-density scaling N = side^d / eps^(d-1), where
    /// each particle meets order-one others per unit time.
    pub fn low_density_scaling(side: f64, eps: f64, beta: f64, seed: u64) -> Result<Self> {
        let n = (side.powi(D as i32) / eps.powi(D as i32 - 1)).round() as usize;
        Self::new(n, eps, side, beta, seed)
    }

    /// N eps^(d-1) / side^d; equals 1 at the low-density scaling.
    pub fn scaling_ratio(&self) -> f64 {
        self.n as f64 * self.eps.powi(D as i32 - 1) / self.geom.side().powi(D as i32)
    }

    /// Fraction of the torus covered by the exclusion balls of radius `eps`
    /// around the particle centers (the volume a further center cannot enter).
    pub fn packing_fraction(&self) -> f64 {
        let unit_ball = match D {
            2 => std::f64::consts::PI,
            3 => 4.0 * std::f64::consts::PI / 3.0,
            _ => unreachable!("TorusGeometry admits only d in {{2,3}}"),
        };
        self.n as f64 * unit_ball * self.eps.powi(D as i32) / self.geom.side().powi(D as i32)
    }
}

/// Positions and velocities of all spheres; index 0 is the tagged particle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Configuration<const D: usize> {
    pub positions: Vec<Vector<D>>,
    pub velocities: Vec<Vector<D>>,
    pub tagged_index: usize,
}

impl<const D: usize> Configuration<D> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Draw a velocity with independent centered Gaussian components of variance
/// 1/beta. Panics if beta <= 0 (validated upstream in GasParameters).
pub fn sample_maxwellian<const D: usize, R: Rng + ?Sized>(beta: f64, rng: &mut R) -> Vector<D> {
    assert!(beta > 0.0, "beta must be positive");
    let scale = (1.0 / beta).sqrt();
    Vector::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Probability density of the speed |v| when v has independent N(0, 1/beta)
/// components in d dimensions.
pub fn maxwell_speed_density<const D: usize>(beta: f64, s: f64) -> f64 {
    if s < 0.0 {
        return 0.0;
    }
    match D {
        2 => beta * s * (-0.5 * beta * s * s).exp(),
        3 => {
            (2.0 / std::f64::consts::PI).sqrt()
                * beta.powf(1.5)
                * s
                * s
                * (-0.5 * beta * s * s).exp()
        }
        _ => unreachable!("speed density implemented for d in {{2,3}}"),
    }
}

/// CDF of the tagged initial position coordinate when the spatial factor of
/// the weight is 1 + a cos(2 pi k x / side), on [0, side].
pub fn cosine_position_cdf(amplitude: f64, mode: u32, side: f64, x: f64) -> f64 {
    let x = x.clamp(0.0, side);
    let w = 2.0 * std::f64::consts::PI * mode as f64 / side;
    (x + amplitude / w * (w * x).sin()) / side
}

// ---------------------------------------------------------------------------
// Tagged-particle weight
// ---------------------------------------------------------------------------

type WeightFn<const D: usize> = Arc<dyn Fn(&Vector<D>, &Vector<D>) -> f64 + Send + Sync>;

/// Bounded density of the tagged particle's initial law relative to the
/// equilibrium law (uniform on the torus times Maxwellian).
///
/// Invariants: 0 <= evaluate(x, v) <= bound everywhere, and the equilibrium
/// mean of evaluate is 1 (so the reweighted law is a probability law).
#[derive(Clone)]
pub struct TaggedWeight<const D: usize> {
    eval: WeightFn<D>,
    /// Sup of the weight; the rejection sampler accepts with rate 1/bound.
    pub bound: f64,
    /// Lipschitz constant of the weight in (x, v).
    pub lipschitz: f64,
    /// True when the unit-mean normalization has been verified (analytically
    /// for the built-in families, by quadrature for custom weights).
    pub normalization_checked: bool,
}

impl<const D: usize> std::fmt::Debug for TaggedWeight<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaggedWeight")
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .field("normalization_checked", &self.normalization_checked)
            .finish()
    }
}

impl<const D: usize> TaggedWeight<D> {
    pub fn evaluate(&self, x: &Vector<D>, v: &Vector<D>) -> f64 {
        (self.eval)(x, v)
    }

    /// Unit weight: the tagged particle starts at equilibrium.
    pub fn uniform() -> Self {
        TaggedWeight {
            eval: Arc::new(|_, _| 1.0),
            bound: 1.0,
            lipschitz: 0.0,
            normalization_checked: true,
        }
    }

    /// w(x, v) = 1 + amplitude cos(2 pi mode x_1 / side). Mean 1 analytically
    /// because the cosine completes `mode` full periods over the torus.
    pub fn cosine(amplitude: f64, mode: u32, side: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&amplitude) {
            return Err(Error::InvalidParam(format!(
                "cosine amplitude {amplitude} must lie in [0, 1] for a nonnegative weight"
            )));
        }
        if mode == 0 || !(side > 0.0) {
            return Err(Error::InvalidParam("cosine weight needs mode >= 1 and side > 0".into()));
        }
        let w = 2.0 * std::f64::consts::PI * mode as f64 / side;
        Ok(TaggedWeight {
            eval: Arc::new(move |x, _| 1.0 + amplitude * (w * x[0]).cos()),
            bound: 1.0 + amplitude,
            lipschitz: amplitude * w,
            normalization_checked: true,
        })
    }

    /// w(x, v) = (1 + amplitude cos(2 pi mode x_1 / side)) g(|v|) / <g>,
    /// where <g> is the Maxwellian speed average computed by quadrature.
    /// `g_sup` and `g_lipschitz` must bound g and its slope on [0, inf).
    pub fn cosine_with_speed_factor(
        amplitude: f64,
        mode: u32,
        side: f64,
        beta: f64,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_sup: f64,
        g_lipschitz: f64,
    ) -> Result<Self> {
        Self::cosine(amplitude, mode, side)?; // validates amplitude, mode, side
        if !(beta > 0.0) {
            return Err(Error::InvalidParam(format!("beta {beta} must be positive")));
        }
        // speeds beyond 12/sqrt(beta) carry < 1e-30 of the Maxwellian mass
        let s_max = 12.0 / beta.sqrt();
        let mean_g = quad::adaptive(
            &|s| g(s) * maxwell_speed_density::<D>(beta, s),
            0.0,
            s_max,
            tol::QUAD_RTOL,
            1e-300,
        )?;
        if !(mean_g > 0.0) {
            return Err(Error::InvalidParam(format!(
                "speed factor has nonpositive Maxwellian mean {mean_g}"
            )));
        }
        let w = 2.0 * std::f64::consts::PI * mode as f64 / side;
        Ok(TaggedWeight {
            eval: Arc::new(move |x, v| {
                (1.0 + amplitude * (w * x[0]).cos()) * g(v.norm()) / mean_g
            }),
            bound: (1.0 + amplitude) * g_sup / mean_g,
            lipschitz: (amplitude * w * g_sup + (1.0 + amplitude) * g_lipschitz) / mean_g,
            normalization_checked: true,
        })
    }

    /// Arbitrary weight; verifies the unit-mean normalization by tensor
    /// quadrature and rejects if it is off by more than 1%.
    pub fn custom(
        eval: WeightFn<D>,
        bound: f64,
        lipschitz: f64,
        side: f64,
        beta: f64,
    ) -> Result<Self> {
        let w = TaggedWeight { eval, bound, lipschitz, normalization_checked: false };
        let mean = w.mean_under_equilibrium(side, beta);
        if (mean - 1.0).abs() > 0.01 {
            return Err(Error::InvalidParam(format!(
                "custom weight has equilibrium mean {mean:.6}, expected 1 within 1%"
            )));
        }
        Ok(TaggedWeight { normalization_checked: true, ..w })
    }

    /// Arbitrary weight with the normalization left to the caller. Intended
    /// for experiments; the sampler still enforces the bound.
    pub fn custom_unchecked(eval: WeightFn<D>, bound: f64, lipschitz: f64) -> Self {
        TaggedWeight { eval, bound, lipschitz, normalization_checked: false }
    }

    /// Equilibrium mean of the weight: uniform Gauss-Legendre average over
    /// [0, side]^d in x; polar (d=2) or spherical (d=3) average in v so that
    /// radial kinks like g(|v|) = e^{-|v|} stay smooth along every
    /// integration axis. Speeds are truncated at 10/sqrt(beta).
    pub fn mean_under_equilibrium(&self, side: f64, beta: f64) -> f64 {
        let nx = if D == 2 { 16 } else { 8 };
        let (xn, xw) = quad::gauss_legendre(nx);
        let x_nodes: Vec<(f64, f64)> =
            xn.iter().zip(&xw).map(|(t, w)| (0.5 * side * (t + 1.0), 0.5 * w)).collect();
        let s_max = 10.0 / beta.sqrt();
        let (rn, rw) = quad::gauss_legendre(48);
        let r_nodes: Vec<(f64, f64)> = rn
            .iter()
            .zip(&rw)
            .map(|(t, w)| {
                let r = 0.5 * s_max * (t + 1.0);
                (r, 0.5 * s_max * w * maxwell_speed_density::<D>(beta, r))
            })
            .collect();
        let n_ang = 32usize;
        let (un, uw) = quad::gauss_legendre(16); // cos(polar angle) for d=3
        // Maxwellian average over v at fixed x: radial rule times the uniform
        // angular average (trapezoid on the circle is spectrally accurate for
        // periodic integrands; product Gauss x trapezoid on the sphere).
        let vel_avg = |x: &Vector<D>| -> f64 {
            let mut total = 0.0;
            for &(r, wr) in &r_nodes {
                let mut ang = 0.0;
                if D == 2 {
                    for k in 0..n_ang {
                        let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n_ang as f64;
                        let mut v = Vector::<D>([0.0; D]);
                        v.0[0] = r * th.cos();
                        v.0[1] = r * th.sin();
                        ang += self.evaluate(x, &v);
                    }
                    ang /= n_ang as f64;
                } else {
                    for (u, wu) in un.iter().zip(&uw) {
                        let rho = (1.0 - u * u).max(0.0).sqrt();
                        for k in 0..16 {
                            let ph =
                                2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 16.0;
                            let mut v = Vector::<D>([0.0; D]);
                            v.0[0] = r * rho * ph.cos();
                            v.0[1] = r * rho * ph.sin();
                            v.0[2] = r * u;
                            ang += 0.5 * wu / 16.0 * self.evaluate(x, &v);
                        }
                    }
                }
                total += wr * ang;
            }
            total
        };
        let mut total = 0.0;
        let mut idx = [0usize; 3];
        loop {
            let mut x = Vector::<D>([0.0; D]);
            let mut weight = 1.0;
            for a in 0..D {
                let (xa, wx) = x_nodes[idx[a]];
                x.0[a] = xa;
                weight *= wx;
            }
            total += weight * vel_avg(&x);
            let mut a = 0;
            loop {
                if a == D {
                    return total;
                }
                idx[a] += 1;
                if idx[a] < nx {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exclusion queries
// ---------------------------------------------------------------------------

/// Uniform cell grid for O(1) overlap queries; cell side >= eps so any pair
/// closer than eps lies in adjacent cells. Falls back to linear scans when
/// the torus is too few cells wide for the adjacency argument.
struct NeighborGrid<const D: usize> {
    m: usize,
    buckets: Vec<Vec<u32>>,
    cell_of: Vec<u32>,
}

enum Lookup<const D: usize> {
    Brute,
    Grid(NeighborGrid<D>),
}

impl<const D: usize> NeighborGrid<D> {
    fn cells_per_axis(side: f64, eps: f64, n: usize) -> usize {
        let by_eps = (side / eps).floor() as usize;
        let by_count = (n as f64).powf(1.0 / D as f64).ceil() as usize + 1;
        by_eps.min(by_count.max(4))
    }

    fn cell_index(&self, x: &Vector<D>, side: f64) -> usize {
        let mut idx = 0usize;
        for a in 0..D {
            let c = ((x[a] / side * self.m as f64) as usize).min(self.m - 1);
            idx = idx * self.m + c;
        }
        idx
    }
}

impl<const D: usize> Lookup<D> {
    fn new(side: f64, eps: f64, n: usize) -> Self {
        let m = NeighborGrid::<D>::cells_per_axis(side, eps, n);
        if n <= 128 || m < 4 {
            Lookup::Brute
        } else {
            Lookup::Grid(NeighborGrid {
                m,
                buckets: vec![Vec::new(); m.pow(D as u32)],
                cell_of: Vec::with_capacity(n),
            })
        }
    }

    fn insert(&mut self, x: &Vector<D>, id: u32, side: f64) {
        if let Lookup::Grid(g) = self {
            let c = g.cell_index(x, side);
            g.buckets[c].push(id);
            debug_assert_eq!(g.cell_of.len(), id as usize);
            g.cell_of.push(c as u32);
        }
    }

    fn relocate(&mut self, x_new: &Vector<D>, id: u32, side: f64) {
        if let Lookup::Grid(g) = self {
            let old = g.cell_of[id as usize] as usize;
            let new = g.cell_index(x_new, side);
            if old == new {
                return;
            }
            let slot = g.buckets[old].iter().position(|&p| p == id).expect("id in its cell");
            g.buckets[old].swap_remove(slot);
            g.buckets[new].push(id);
            g.cell_of[id as usize] = new as u32;
        }
    }

    /// True if any particle other than `skip` lies within `eps` of `x`.
    fn overlaps(
        &self,
        positions: &[Vector<D>],
        x: &Vector<D>,
        eps: f64,
        geom: &TorusGeometry<D>,
        skip: Option<u32>,
    ) -> bool {
        match self {
            Lookup::Brute => positions.iter().enumerate().any(|(j, p)| {
                Some(j as u32) != skip && geom.separation(*x, *p).norm_sq() <= eps * eps
            }),
            Lookup::Grid(g) => {
                let mut cell = [0usize; D];
                for a in 0..D {
                    cell[a] = ((x[a] / geom.side() * g.m as f64) as usize).min(g.m - 1);
                }
                let mut off = [-1i64; D];
                loop {
                    let mut idx = 0usize;
                    for a in 0..D {
                        let c = (cell[a] as i64 + off[a]).rem_euclid(g.m as i64) as usize;
                        idx = idx * g.m + c;
                    }
                    for &j in &g.buckets[idx] {
                        if Some(j) != skip
                            && geom.separation(*x, positions[j as usize]).norm_sq() <= eps * eps
                        {
                            return true;
                        }
                    }
                    let mut a = 0;
                    loop {
                        if a == D {
                            return false;
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
        }
    }
}

/// True iff every pairwise torus distance strictly exceeds eps.
pub fn validate_exclusion<const D: usize>(
    positions: &[Vector<D>],
    eps: f64,
    geom: &TorusGeometry<D>,
) -> bool {
    let mut lookup = Lookup::<D>::new(geom.side(), eps, positions.len());
    for (i, x) in positions.iter().enumerate() {
        if lookup.overlaps(&positions[..i], x, eps, geom, None) {
            return false;
        }
        lookup.insert(x, i as u32, geom.side());
    }
    true
}

/// Smallest pairwise torus distance, by full O(N^2) scan; diagnostics only.
pub fn min_pair_distance<const D: usize>(
    positions: &[Vector<D>],
    geom: &TorusGeometry<D>,
) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..positions.len() {
        for j in 0..i {
            best = best.min(geom.separation(positions[i], positions[j]).norm());
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Position sampling
// ---------------------------------------------------------------------------

const PLACEMENT_ATTEMPTS: u64 = 1_000_000;
/// Below this packing fraction sequential insertion alone is statistically
/// indistinguishable from the uniform exclusion law; above it we relax with
/// Metropolis sweeps.
const DIRECT_INSERTION_PACKING: f64 = 0.01;
const METROPOLIS_SWEEPS: usize = 50;

fn uniform_point<const D: usize, R: Rng + ?Sized>(side: f64, rng: &mut R) -> Vector<D> {
    Vector::from_fn(|_| rng.random::<f64>() * side)
}

fn uniform_in_ball<const D: usize, R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Vector<D> {
    loop {
        let p = Vector::<D>::from_fn(|_| (2.0 * rng.random::<f64>() - 1.0) * radius);
        if p.norm_sq() <= radius * radius {
            return p;
        }
    }
}

/// Sequential insertion: each particle is drawn uniformly until it avoids all
/// previously placed ones. `first_fixed` keeps positions[0] pinned (used when
/// the tagged position was sampled separately).
fn insert_sequentially<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    positions: &mut Vec<Vector<D>>,
    lookup: &mut Lookup<D>,
    rng: &mut R,
) -> Result<()> {
    let geom = &params.geom;
    while positions.len() < params.n {
        let id = positions.len() as u32;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = uniform_point(geom.side(), rng);
            if !lookup.overlaps(positions, &x, params.eps, geom, None) {
                lookup.insert(&x, id, geom.side());
                positions.push(x);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::DensityTooHigh { attempts: PLACEMENT_ATTEMPTS });
        }
    }
    Ok(())
}

/// Metropolis relaxation toward the uniform exclusion law: symmetric ball
/// proposals of radius 2 eps, rejected on overlap. Particles below
/// `first_movable` stay pinned.
fn metropolis_relax<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    positions: &mut [Vector<D>],
    lookup: &mut Lookup<D>,
    first_movable: usize,
    rng: &mut R,
) {
    let geom = &params.geom;
    for _ in 0..METROPOLIS_SWEEPS {
        for i in first_movable..positions.len() {
            let proposal = geom.wrap(positions[i] + uniform_in_ball(2.0 * params.eps, rng));
            if !lookup.overlaps(positions, &proposal, params.eps, geom, Some(i as u32)) {
                positions[i] = proposal;
                lookup.relocate(&proposal, i as u32, geom.side());
            }
        }
    }
}

fn sample_positions_from<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    pinned_first: Option<Vector<D>>,
    rng: &mut R,
) -> Result<Vec<Vector<D>>> {
    let mut positions = Vec::with_capacity(params.n);
    let mut lookup = Lookup::<D>::new(params.geom.side(), params.eps, params.n);
    let first_movable = if let Some(x0) = pinned_first {
        lookup.insert(&x0, 0, params.geom.side());
        positions.push(x0);
        1
    } else {
        0
    };
    insert_sequentially(params, &mut positions, &mut lookup, rng)?;
    if params.packing_fraction() >= DIRECT_INSERTION_PACKING {
        metropolis_relax(params, &mut positions, &mut lookup, first_movable, rng);
    }
    Ok(positions)
}

/// Positions distributed uniformly over the exclusion domain (all pairwise
/// torus distances > eps).
pub fn sample_positions<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    rng: &mut R,
) -> Result<Vec<Vector<D>>> {
    sample_positions_from(params, None, rng)
}

/// Full equilibrium draw: uniform exclusion positions, Maxwellian velocities.
pub fn sample_equilibrium<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    rng: &mut R,
) -> Result<Configuration<D>> {
    let positions = sample_positions(params, rng)?;
    let velocities = (0..params.n).map(|_| sample_maxwellian(params.beta, rng)).collect();
    Ok(Configuration { positions, velocities, tagged_index: 0 })
}

const TAGGED_TRIALS_CAP: u64 = 100_000;

/// Configuration with the tagged particle reweighted by `weight` and the
/// rest at equilibrium conditioned on it. Returns the configuration and the
/// number of proposals the tagged rejection loop consumed (its expectation is
/// weight.bound, so averaging 1/trials over calls estimates the acceptance).
///
/// The weight touches only particle 0, so the joint law factorizes: draw
/// (x_0, v_0) by rejection against the equilibrium one-particle law, then
/// fill in the other N-1 particles uniformly over the exclusion domain
/// conditioned on x_0 (sequential insertion with x_0 pinned, Metropolis
/// sweeps that never move particle 0).
pub fn sample_tagged_initial<const D: usize, R: Rng + ?Sized>(
    params: &GasParameters<D>,
    weight: &TaggedWeight<D>,
    rng: &mut R,
) -> Result<(Configuration<D>, u64)> {
    let mut trials = 0u64;
    let (x0, v0) = loop {
        trials += 1;
        if trials > TAGGED_TRIALS_CAP {
            return Err(Error::WeightTooPeaked { acceptance: 0.0, trials: TAGGED_TRIALS_CAP });
        }
        let x = uniform_point(params.geom.side(), rng);
        let v = sample_maxwellian(params.beta, rng);
        let w = weight.evaluate(&x, &v);
        debug_assert!(
            (0.0..=weight.bound * (1.0 + 1e-12)).contains(&w),
            "weight {w} outside [0, bound {}]",
            weight.bound
        );
        if rng.random::<f64>() * weight.bound < w {
            break (x, v);
        }
    };
    let positions = sample_positions_from(params, Some(x0), rng)?;
    let mut velocities = vec![v0];
    velocities.extend((1..params.n).map(|_| sample_maxwellian::<D, R>(params.beta, rng)));
    Ok((Configuration { positions, velocities, tagged_index: 0 }, trials))
}

// ---------------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------------

/// Write "N d side eps beta seed" then one "x... v..." line per particle,
/// 17 significant digits (enough to reproduce every f64 bit-for-bit).
pub fn write_snapshot<const D: usize, W: std::io::Write>(
    out: &mut W,
    conf: &Configuration<D>,
    params: &GasParameters<D>,
) -> Result<()> {
    writeln!(
        out,
        "{} {} {:.16e} {:.16e} {:.16e} {}",
        params.n, D, params.geom.side(), params.eps, params.beta, params.seed
    )?;
    for (x, v) in conf.positions.iter().zip(&conf.velocities) {
        let mut parts = Vec::with_capacity(2 * D);
        for a in 0..D {
            parts.push(format!("{:.16e}", x[a]));
        }
        for a in 0..D {
            parts.push(format!("{:.16e}", v[a]));
        }
        writeln!(out, "{}", parts.join(" "))?;
    }
    Ok(())
}

pub fn read_snapshot<const D: usize, R: std::io::BufRead>(
    input: &mut R,
) -> Result<(Configuration<D>, GasParameters<D>)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::Parse(format!(
            "snapshot header has {} fields, expected 6",
            fields.len()
        )));
    }
    let parse_f = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Parse(format!("bad {what} in snapshot header: {s:?}")))
    };
    let n: usize =
        fields[0].parse().map_err(|_| Error::Parse(format!("bad N: {:?}", fields[0])))?;
    let d: usize =
        fields[1].parse().map_err(|_| Error::Parse(format!("bad d: {:?}", fields[1])))?;
    if d != D {
        return Err(Error::Parse(format!("snapshot dimension {d} does not match expected {D}")));
    }
    let side = parse_f(fields[2], "side")?;
    let eps = parse_f(fields[3], "eps")?;
    let beta = parse_f(fields[4], "beta")?;
    let seed: u64 =
        fields[5].parse().map_err(|_| Error::Parse(format!("bad seed: {:?}", fields[5])))?;
    let params = GasParameters::<D>::new(n, eps, side, beta, seed)?;
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Parse(format!("snapshot ends after {i} of {n} particles")));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| parse_f(s, "coordinate"))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * D {
            return Err(Error::Parse(format!(
                "particle line {i} has {} values, expected {}",
                vals.len(),
                2 * D
            )));
        }
        positions.push(Vector::<D>::from_fn(|a| vals[a]));
        velocities.push(Vector::<D>::from_fn(|a| vals[D + a]));
    }
    Ok((Configuration { positions, velocities, tagged_index: 0 }, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params2(n: usize, eps: f64, side: f64) -> GasParameters<2> {
        GasParameters::<2>::new(n, eps, side, 1.0, 1).unwrap()
    }

    #[test]
    fn parameter_validation() {
        assert!(GasParameters::<2>::new(0, 0.1, 1.0, 1.0, 1).is_err());
        assert!(GasParameters::<2>::new(2, 0.3, 1.0, 1.0, 1).is_err()); // eps >= side/4
        assert!(GasParameters::<2>::new(2, 0.1, 1.0, -1.0, 1).is_err());
        assert!(GasParameters::<2>::new(50, 0.1, 1.0, 1.0, 1).is_err()); // packing
        let p = GasParameters::<2>::low_density_scaling(8.0, 0.0625, 1.0, 3).unwrap();
        assert_eq!(p.n, 1024);
        assert!((p.scaling_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxwellian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = Vector::<3>([0.0; 3]);
        let mut sq = [0.0f64; 3];
        let mut speed_sq = 0.0;
        for _ in 0..n {
            let v = sample_maxwellian::<3, _>(2.0, &mut rng);
            sum += v;
            for a in 0..3 {
                sq[a] += v[a] * v[a];
            }
            speed_sq += v.norm_sq();
        }
        let nf = n as f64;
        for a in 0..3 {
            // component mean 0 within 4 sigma/sqrt(n), sigma^2 = 1/beta
            assert!((sum[a] / nf).abs() < 4.0 * (0.5f64 / nf).sqrt(), "mean[{a}]");
            assert!((sq[a] / nf - 0.5).abs() < 0.03 * 0.5, "var[{a}]");
        }
        assert!((speed_sq / nf - 1.5).abs() < 0.03 * 1.5);
    }

    /// For N=2 the conditional-uniform law is exactly samplable by whole-pair
    /// rejection; both sampler paths must match it in distribution.
    fn pair_distance_ks(eps: f64, seed: u64) -> f64 {
        let params = params2(2, eps, 1.0);
        let geom = params.geom;
        let draws = 6000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ours: Vec<f64> = (0..draws)
            .map(|_| {
                let pos = sample_positions(&params, &mut rng).unwrap();
                geom.separation(pos[0], pos[1]).norm()
            })
            .collect();
        let oracle: Vec<f64> = (0..draws)
            .map(|_| loop {
                let a = uniform_point::<2, _>(1.0, &mut rng);
                let b = uniform_point::<2, _>(1.0, &mut rng);
                let d = geom.separation(a, b).norm();
                if d > eps {
                    break d;
                }
            })
            .collect();
        stats::ks_two_sample(&ours, &oracle).p_value
    }

    #[test]
    fn pair_distance_matches_conditional_uniform_direct_path() {
        // packing 2 pi (0.03)^2 = 0.0057 < 0.01: sequential insertion only
        assert!(pair_distance_ks(0.03, 21) > 0.01);
    }

    #[test]
    fn pair_distance_matches_conditional_uniform_metropolis_path() {
        // packing 2 pi (0.1)^2 = 0.063 >= 0.01: Metropolis sweeps engaged
        assert!(pair_distance_ks(0.1, 22) > 0.01);
    }

    #[test]
    fn sampled_positions_always_pass_exclusion() {
        for seed in 0..40 {
            let params = GasParameters::<2>::new(60, 0.02, 2.0, 1.0, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pos = sample_positions(&params, &mut rng).unwrap();
            assert!(validate_exclusion(&pos, params.eps, &params.geom), "seed {seed}");
            assert!(min_pair_distance(&pos, &params.geom) > params.eps);
        }
        // single particle: uniform, trivially valid
        let params = GasParameters::<2>::new(1, 0.01, 1.0, 1.0, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_positions(&params, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn exclusion_check_detects_overlap_and_agrees_with_brute_force() {
        let geom = TorusGeometry::<2>::new(1.0).unwrap();
        let at = |x: f64, y: f64| Vector::<2>([x, y]);
        assert!(validate_exclusion(&[at(0.1, 0.1), at(0.3, 0.1)], 0.1, &geom));
        assert!(!validate_exclusion(&[at(0.1, 0.1), at(0.15, 0.1)], 0.1, &geom));
        // through the periodic boundary
        assert!(!validate_exclusion(&[at(0.02, 0.5), at(0.98, 0.5)], 0.1, &geom));

        // grid path (N > 128) against the O(N^2) definition
        let geom = TorusGeometry::<2>::new(8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let pos: Vec<Vector<2>> =
                (0..500).map(|_| uniform_point::<2, _>(8.0, &mut rng)).collect();
            let eps = 0.12;
            let slow = (0..pos.len()).all(|i| {
                (0..i).all(|j| geom.separation(pos[i], pos[j]).norm() > eps)
            });
            assert_eq!(validate_exclusion(&pos, eps, &geom), slow, "trial {trial}");
        }
    }

    #[test]
    fn tagged_position_marginal_follows_cosine_weight() {
        let params = GasParameters::<2>::new(50, 0.01, 2.0, 1.0, 9).unwrap();
        let weight = TaggedWeight::cosine(0.5, 1, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs: Vec<f64> = (0..2000)
            .map(|_| sample_tagged_initial(&params, &weight, &mut rng).unwrap().0.positions[0][0])
            .collect();
        let ks = stats::ks_test_cdf(&xs, |x| cosine_position_cdf(0.5, 1, 2.0, x));
        assert!(ks.p_value > 0.01, "p = {}", ks.p_value);
        // and the same draws must NOT look uniform
        let flat = stats::ks_test_cdf(&xs, |x| x / 2.0);
        assert!(flat.p_value < 1e-6);
    }

    #[test]
    fn tagged_velocity_marginal_stays_maxwellian() {
        // weight touches position only, so the tagged velocity is Maxwellian
        let params = GasParameters::<2>::new(3, 0.01, 1.0, 2.0, 9).unwrap();
        let weight = TaggedWeight::cosine(0.8, 2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let vs: Vec<f64> = (0..4000)
            .map(|_| sample_tagged_initial(&params, &weight, &mut rng).unwrap().0.velocities[0][1])
            .collect();
        let ks = stats::ks_test_cdf(&vs, |v| stats::normal_cdf(v * 2.0f64.sqrt()));
        assert!(ks.p_value > 0.01, "p = {}", ks.p_value);
    }

    #[test]
    fn tagged_acceptance_rate_is_inverse_bound() {
        let params = GasParameters::<2>::new(3, 0.01, 1.0, 1.0, 9).unwrap();
        let weight = TaggedWeight::cosine(0.5, 1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let calls = 3000u64;
        let total: u64 =
            (0..calls).map(|_| sample_tagged_initial(&params, &weight, &mut rng).unwrap().1).sum();
        let acceptance = calls as f64 / total as f64;
        let expected = 1.0 / weight.bound;
        assert!(
            (acceptance - expected).abs() < 0.05 * expected,
            "acceptance {acceptance} vs {expected}"
        );
    }

    #[test]
    fn hopeless_weight_reports_peaked_error() {
        let params = GasParameters::<2>::new(2, 0.01, 1.0, 1.0, 9).unwrap();
        // acceptance probability 1e-9: the proposal cap must trip
        let weight =
            TaggedWeight::<2>::custom_unchecked(Arc::new(|_, _| 1e-9), 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        match sample_tagged_initial(&params, &weight, &mut rng) {
            Err(Error::WeightTooPeaked { trials, .. }) => assert_eq!(trials, 100_000),
            other => panic!("expected WeightTooPeaked, got {other:?}"),
        }
    }

    #[test]
    fn speed_factor_normalization_against_closed_form() {
        // E[exp(-|v|)] under the 2-D Maxwellian at beta=1:
        // 1 - sqrt(pi/2) e^{1/2} erfc(1/sqrt(2)) = 0.34432045758120144
        let mean_g = 0.34432045758120144;
        let w = TaggedWeight::<2>::cosine_with_speed_factor(
            0.3,
            1,
            1.0,
            1.0,
            |s| (-s).exp(),
            1.0,
            1.0,
        )
        .unwrap();
        // evaluate at a point where the cosine factor is 1 and |v| = 1
        let x = Vector::<2>([0.25, 0.0]);
        let v = Vector::<2>([1.0, 0.0]);
        let expected = (-1.0f64).exp() / mean_g;
        assert!((w.evaluate(&x, &v) - expected).abs() < 1e-9 * expected);
        assert!((w.bound - 1.3 / mean_g).abs() < 1e-9);
        // the tensor quadrature agrees that the weight has unit mean
        let mean = w.mean_under_equilibrium(1.0, 1.0);
        assert!((mean - 1.0).abs() < 1e-4, "mean {mean}");
    }

    #[test]
    fn speed_factor_normalization_in_three_dimensions() {
        // E[exp(-|v|)] under the 3-D Maxwellian at beta=1:
        // sqrt(2/pi) e^{1/2} (2 sqrt(pi/2) erfc(1/sqrt(2)) - e^{-1/2})
        let mean_g = 0.24842860665762814;
        let w = TaggedWeight::<3>::cosine_with_speed_factor(
            0.4,
            1,
            2.0,
            1.0,
            |s| (-s).exp(),
            1.0,
            1.0,
        )
        .unwrap();
        assert!((w.bound - 1.4 / mean_g).abs() < 1e-8 / mean_g, "bound {}", w.bound);
        let mean = w.mean_under_equilibrium(2.0, 1.0);
        assert!((mean - 1.0).abs() < 1e-4, "mean {mean}");
    }

    #[test]
    fn custom_weight_normalization_gate() {
        let ok = TaggedWeight::<2>::custom(
            Arc::new(|x, _| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos()),
            1.5,
            0.5 * 2.0 * std::f64::consts::PI,
            1.0,
            1.0,
        );
        assert!(ok.unwrap().normalization_checked);
        let bad = TaggedWeight::<2>::custom(Arc::new(|_, _| 1.1), 1.1, 0.0, 1.0, 1.0);
        assert!(bad.is_err());
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let params = GasParameters::<3>::new(17, 0.05, 2.0, 1.7, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let conf = sample_equilibrium(&params, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &conf, &params).unwrap();
        let (back, p2) = read_snapshot::<3, _>(&mut &buf[..]).unwrap();
        assert_eq!(p2.n, params.n);
        assert_eq!(p2.eps.to_bits(), params.eps.to_bits());
        assert_eq!(p2.beta.to_bits(), params.beta.to_bits());
        assert_eq!(p2.seed, params.seed);
        for i in 0..conf.len() {
            for a in 0..3 {
                assert_eq!(back.positions[i][a].to_bits(), conf.positions[i][a].to_bits());
                assert_eq!(back.velocities[i][a].to_bits(), conf.velocities[i][a].to_bits());
            }
        }
        // dimension mismatch is refused
        assert!(read_snapshot::<2, _>(&mut &buf[..]).is_err());
    }

    #[test]
    fn same_seed_reproduces_configuration_exactly() {
        let params = GasParameters::<2>::new(80, 0.03, 2.0, 1.0, 1234).unwrap();
        let weight = TaggedWeight::cosine(0.5, 1, 2.0).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            sample_tagged_initial(&params, &weight, &mut rng).unwrap().0
        };
        let (a, b) = (draw(), draw());
        for i in 0..a.len() {
            for d in 0..2 {
                assert_eq!(a.positions[i][d].to_bits(), b.positions[i][d].to_bits());
                assert_eq!(a.velocities[i][d].to_bits(), b.velocities[i][d].to_bits());
            }
        }
    }
}
