//! Diffusion coefficient of the tagged particle, estimated three independent
//! ways, plus the diffusive-rescaling toolkit.
//!
//! The three estimators are deliberately disjoint in their inputs:
//!
//! * spectral — solve `-L chi_a = v_a` on the velocity grid by conjugate
//!   gradients in the Maxwellian-weighted inner product (restricted to the
//!   orthogonal complement of constants, the null space), then
//!   `kappa = (1/d) sum_a <v_a, chi_a>`;
//! * Green-Kubo — integrate the empirical velocity autocorrelation of
//!   stationary trajectories up to a detected decorrelation plateau;
//! * mean-squared displacement — weighted line fit of `E|x(t)-x(0)|^2`
//!   over a diffusive window, slope `2 d kappa`.
//!
//! The dissipative operator makes the raw spectral value
//! `<v, L^{-1} v>` negative; estimates report the positive convention
//! (the heat equation `d_tau rho = kappa Lap rho` needs `kappa > 0`) and
//! keep the raw signed value in the estimate for the record.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vector;
use crate::lboltz::{weighted_dot, OperatorL};
use crate::stats;
use crate::tol;

/// How a diffusion coefficient was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMethod {
    Spectral,
    GreenKubo,
    MsdFit,
}

/// A diffusion coefficient with its uncertainty and provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionEstimate {
    pub kappa: f64,
    pub method: KappaMethod,
    /// For sampling estimators a 95% interval; for the spectral solve a
    /// numerical-tolerance interval from the linear-solver residual.
    pub ci: (f64, f64),
    /// The signed value before the positive-sign convention (spectral only;
    /// equals `-kappa` there, `kappa` otherwise).
    pub raw_signed: f64,
    /// Set when an estimator saw structure it does not model (for the MSD
    /// fit: weighted R^2 below 0.99, so the window is not linear).
    pub nonlinear_warning: bool,
    /// Human-readable description of the inputs.
    pub provenance: String,
}

impl DiffusionEstimate {
    fn validate(self) -> Result<Self> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidParam(format!(
                "diffusion coefficient must be positive, got {} ({:?}); \
                 a negative value means the sign convention was violated",
                self.kappa, self.method
            )));
        }
        if !(self.ci.0 <= self.kappa && self.kappa <= self.ci.1) {
            return Err(Error::InvalidParam(format!(
                "confidence interval ({}, {}) does not contain kappa {}",
                self.ci.0, self.ci.1, self.kappa
            )));
        }
        Ok(self)
    }
}

/// Conjugate gradients for `A x = b` with `A = -L` restricted to the
/// orthogonal complement of constants in the Maxwellian-weighted inner
/// product. Returns the solution and the relative residual achieved.
fn cg_weighted<const D: usize>(
    op: &OperatorL<D>,
    b: &[f64],
    max_iters: usize,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = op.n;
    let mass = &op.grid.mass;
    let project = |v: &mut [f64]| {
        let avg: f64 = mass.iter().zip(v.iter()).map(|(&m, &x)| m * x).sum();
        for x in v.iter_mut() {
            *x -= avg;
        }
    };
    let mut b = b.to_vec();
    project(&mut b);
    let b_norm = weighted_dot(&op.grid, &b, &b).sqrt();
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0.0, 0));
    }
    let apply_a = |x: &[f64]| {
        let mut y = op.apply(x);
        for v in y.iter_mut() {
            *v = -*v;
        }
        y
    };
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = weighted_dot(&op.grid, &r, &r);
    let mut iters = 0;
    while iters < max_iters {
        if rs.sqrt() <= tol::CG_RTOL * b_norm {
            break;
        }
        let mut ap = apply_a(&p);
        project(&mut ap);
        let alpha = rs / weighted_dot(&op.grid, &p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = weighted_dot(&op.grid, &r, &r);
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        iters += 1;
    }
    let residual = rs.sqrt() / b_norm;
    if residual > 1e-10 {
        return Err(Error::CgNoConvergence { residual, iters });
    }
    project(&mut x);
    Ok((x, residual, iters))
}

/// Diffusion coefficient from the discretized generator:
/// `kappa = (1/d) sum_a <v_a, (-L)^{-1} v_a>` in the weighted inner product.
pub fn solve_kappa_spectral<const D: usize>(op: &OperatorL<D>) -> Result<DiffusionEstimate> {
    let n = op.n;
    let mut kappa = 0.0;
    let mut err_bound = 0.0;
    for axis in 0..D {
        let b: Vec<f64> = op.grid.nodes.iter().map(|v| v[axis]).collect();
        let (chi, residual, _) = cg_weighted(op, &b, 10_000)?;
        let b_norm = weighted_dot(&op.grid, &b, &b).sqrt();
        let chi_norm = weighted_dot(&op.grid, &chi, &chi).sqrt();
        kappa += weighted_dot(&op.grid, &b, &chi) / D as f64;
        // Cauchy-Schwarz bound on the inner-product error from the residual
        err_bound += residual * b_norm * chi_norm / D as f64;
    }
    DiffusionEstimate {
        kappa,
        method: KappaMethod::Spectral,
        ci: (kappa - err_bound, kappa + err_bound),
        raw_signed: -kappa,
        nonlinear_warning: false,
        provenance: format!(
            "spectral solve: {n} nodes, spacing {:.6}, cutoff {:.3}, beta {}, angular order {}",
            op.grid.h, op.grid.v_max, op.beta, op.angular_order
        ),
    }
    .validate()
}

/// Same quantity as [`solve_kappa_spectral`] but through a dense LU
/// factorization instead of conjugate gradients, as an independent linear
/// algebra path for cross-checking the iterative solve. Cost is O(n^3), so
/// this is only practical on moderate grids.
pub fn solve_kappa_dense<const D: usize>(op: &OperatorL<D>) -> Result<f64> {
    let n = op.n;
    // weighted symmetric form: S = -diag(mass) L is PSD with null space
    // spanned by constants; a rank-one shift toward that direction makes it
    // definite without changing the solution on the orthogonal complement
    let mass = &op.grid.mass;
    let mut s = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = -mass[i] * op.matrix[i * n + j];
        }
    }
    let scale = (0..n).map(|i| s[(i, i)]).fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return Err(Error::InvalidParam("operator has no dissipation on the diagonal".into()));
    }
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] += scale * mass[i] * mass[j];
        }
    }
    let lu = s.lu();
    let mut kappa = 0.0;
    for axis in 0..D {
        let b = nalgebra::DVector::<f64>::from_iterator(
            n,
            op.grid.nodes.iter().zip(mass).map(|(v, &m)| m * v[axis]),
        );
        let chi = lu.solve(&b).ok_or_else(|| {
            Error::InvalidParam("shifted collision operator is singular".into())
        })?;
        // remove any component along constants picked up by the shift
        let avg: f64 = (0..n).map(|i| mass[i] * chi[i]).sum();
        kappa += (0..n)
            .map(|i| mass[i] * op.grid.nodes[i][axis] * (chi[i] - avg))
            .sum::<f64>()
            / D as f64;
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidParam(format!(
            "dense solve produced a nonpositive diffusion coefficient {kappa}"
        )));
    }
    Ok(kappa)
}

/// Diffusion coefficient from stationary velocity series by the Green-Kubo
/// identity `kappa = (1/d) integral of E[v(0).v(s)] ds`.
///
/// `series` holds velocities sampled every `dt` along independent
/// stationary trajectories; `reference_rate` sets the mean-free-time scale
/// used by the length precondition (total time must exceed 10^3 mean free
/// times). The integral is cut at the first lag where the autocorrelation
/// magnitude stays below twice its standard error for 10 consecutive lags;
/// the confidence interval is from per-trajectory batch means.
pub fn green_kubo_kappa<const D: usize>(
    series: &[Vec<Vector<D>>],
    dt: f64,
    reference_rate: f64,
) -> Result<DiffusionEstimate> {
    if series.len() < 8 {
        return Err(Error::TooShort(format!(
            "{} trajectories; batch-means error estimation needs at least 8",
            series.len()
        )));
    }
    if !(dt > 0.0) || !(reference_rate > 0.0) {
        return Err(Error::InvalidParam(format!(
            "need dt > 0 and reference_rate > 0, got {dt}, {reference_rate}"
        )));
    }
    let shortest = series.iter().map(Vec::len).min().unwrap();
    let total_time: f64 = series.iter().map(|s| s.len() as f64 * dt).sum();
    if total_time * reference_rate < 1e3 {
        return Err(Error::TooShort(format!(
            "total time {total_time:.1} is {:.0} mean free times; need at least 1000",
            total_time * reference_rate
        )));
    }
    let max_lag = shortest / 4;
    if max_lag < 20 {
        return Err(Error::TooShort(format!(
            "shortest series has {shortest} samples; too few lags to detect a plateau"
        )));
    }
    // per-series autocorrelation (1/d) E[v(t).v(t+lag)] at each lag
    let per_series: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            (0..max_lag)
                .map(|lag| {
                    let m = s.len() - lag;
                    s[..m]
                        .iter()
                        .zip(&s[lag..])
                        .map(|(a, b)| a.dot(*b))
                        .sum::<f64>()
                        / (m as f64 * D as f64)
                })
                .collect()
        })
        .collect();
    let s_count = series.len() as f64;
    let mut c = vec![0.0f64; max_lag];
    let mut c_se = vec![0.0f64; max_lag];
    for lag in 0..max_lag {
        let vals: Vec<f64> = per_series.iter().map(|p| p[lag]).collect();
        let m = stats::mean(&vals);
        c[lag] = m;
        let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (s_count - 1.0);
        c_se[lag] = (var / s_count).sqrt();
    }
    // plateau: first lag from which |C| stays below 2 SE for 10 lags
    const QUIET: usize = 10;
    let mut t_cut = None;
    'outer: for start in 1..max_lag.saturating_sub(QUIET) {
        for l in start..start + QUIET {
            if c[l].abs() > 2.0 * c_se[l] {
                continue 'outer;
            }
        }
        t_cut = Some(start);
        break;
    }
    let Some(cut) = t_cut else {
        return Err(Error::NoPlateau { max_lag: max_lag as f64 * dt });
    };
    let integrate = |corr: &[f64]| -> f64 {
        let mut acc = 0.5 * corr[0];
        for &v in &corr[1..cut] {
            acc += v;
        }
        acc += 0.5 * corr[cut];
        acc * dt
    };
    let kappa = integrate(&c);
    let batch: Vec<f64> = per_series.iter().map(|p| integrate(p)).collect();
    let bm = stats::mean(&batch);
    let bvar = batch.iter().map(|x| (x - bm) * (x - bm)).sum::<f64>() / (s_count - 1.0);
    let half = 1.96 * (bvar / s_count).sqrt();
    DiffusionEstimate {
        kappa,
        method: KappaMethod::GreenKubo,
        ci: (kappa - half, kappa + half),
        raw_signed: kappa,
        nonlinear_warning: false,
        provenance: format!(
            "green-kubo: {} series, dt {dt}, cut at lag {cut} ({:.3} time units)",
            series.len(),
            cut as f64 * dt
        ),
    }
    .validate()
}

/// Instantaneous autocorrelation `(1/d) E|v|^2` of pooled velocity samples
/// (equals `1/beta` at equilibrium by equipartition).
pub fn instantaneous_autocorrelation<const D: usize>(series: &[Vec<Vector<D>>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in series {
        for v in s {
            sum += v.norm_sq();
            count += 1;
        }
    }
    sum / (count as f64 * D as f64)
}

/// Mean-squared displacement of an ensemble on a shared time grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsdCurve {
    pub times: Vec<f64>,
    pub msd: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl MsdCurve {
    pub fn new(times: Vec<f64>, msd: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        if times.len() != msd.len() || msd.len() != stderr.len() || times.is_empty() {
            return Err(Error::InvalidParam("curve arrays must share a nonzero length".into()));
        }
        if msd.iter().any(|&m| m < 0.0) || stderr.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParam("squared displacements cannot be negative".into()));
        }
        if times[0] == 0.0 && msd[0] != 0.0 {
            return Err(Error::InvalidParam(format!(
                "displacement at time zero must vanish, got {}",
                msd[0]
            )));
        }
        Ok(Self { times, msd, stderr })
    }

    /// Build the curve from per-replica displacements `x(t_k) - x(0)`
    /// (unwrapped), one inner vector per replica.
    pub fn from_displacements<const D: usize>(
        times: &[f64],
        displacements: &[Vec<Vector<D>>],
    ) -> Result<Self> {
        let r = displacements.len();
        if r < 2 {
            return Err(Error::TooShort(format!("{r} replicas; need at least 2")));
        }
        if displacements.iter().any(|d| d.len() != times.len()) {
            return Err(Error::InvalidParam(
                "every replica must be sampled on the shared time grid".into(),
            ));
        }
        let mut msd = Vec::with_capacity(times.len());
        let mut stderr = Vec::with_capacity(times.len());
        for k in 0..times.len() {
            let sq: Vec<f64> = displacements.iter().map(|d| d[k].norm_sq()).collect();
            let m = stats::mean(&sq);
            let var = sq.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r as f64 - 1.0);
            msd.push(m);
            stderr.push((var / r as f64).sqrt());
        }
        Self::new(times.to_vec(), msd, stderr)
    }
}

/// Fit `kappa` from the diffusive window of an MSD curve: weighted
/// least-squares line, slope `2 d kappa`. The window must start at or after
/// ten mean free times (the ballistic regime is not linear in `t`); a
/// weighted R^2 below 0.99 sets the nonlinear warning.
///
/// The confidence interval treats curve points as independent; when all
/// points come from the same replicas (the usual ensemble curve) their
/// errors are positively correlated and the interval understates the
/// uncertainty, so cross-method comparisons should use relative closeness
/// rather than interval overlap.
pub fn msd_fit<const D: usize>(
    curve: &MsdCurve,
    window: (f64, f64),
    mean_free_time: f64,
) -> Result<DiffusionEstimate> {
    if !(mean_free_time > 0.0) {
        return Err(Error::InvalidParam(format!("need mean_free_time > 0, got {mean_free_time}")));
    }
    if window.0 < 10.0 * mean_free_time * (1.0 - 1e-12) {
        return Err(Error::InvalidParam(format!(
            "window starts at {} but the ballistic regime extends to 10 mean free times ({}); \
             choose a later window",
            window.0,
            10.0 * mean_free_time
        )));
    }
    if !(window.1 > window.0) {
        return Err(Error::InvalidParam(format!("empty window ({}, {})", window.0, window.1)));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for k in 0..curve.times.len() {
        let t = curve.times[k];
        if t >= window.0 && t <= window.1 {
            xs.push(t);
            ys.push(curve.msd[k]);
            ws.push(curve.stderr[k]);
        }
    }
    if xs.len() < 3 {
        return Err(Error::TooShort(format!(
            "{} curve points inside the window; need at least 3",
            xs.len()
        )));
    }
    let all_positive = ws.iter().all(|&s| s > 0.0);
    let weights: Vec<f64> =
        if all_positive { ws.iter().map(|&s| 1.0 / (s * s)).collect() } else { vec![1.0; xs.len()] };
    let fit = stats::weighted_line_fit(&xs, &ys, &weights);
    let kappa = fit.slope / (2.0 * D as f64);
    let half = 1.96 * fit.slope_se / (2.0 * D as f64);
    DiffusionEstimate {
        kappa,
        method: KappaMethod::MsdFit,
        ci: (kappa - half, kappa + half),
        raw_signed: kappa,
        nonlinear_warning: fit.r2 < 0.99,
        provenance: format!(
            "msd fit: {} points in [{}, {}], weighted R^2 {:.6}",
            xs.len(),
            window.0,
            window.1,
            fit.r2
        ),
    }
    .validate()
}

/// A microscopic trajectory viewed through the diffusive rescaling
/// `Xi(tau) = x(lambda^2 tau) / lambda`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RescaledPath<const D: usize> {
    pub lambda: f64,
    pub samples: Vec<(f64, Vector<D>)>,
}

/// Rescale an unwrapped microscopic path. `path` must be defined on
/// `[0, t_end]`; every requested `tau` needs `lambda^2 tau <= t_end`.
pub fn rescale_path<const D: usize>(
    path: impl Fn(f64) -> Vector<D>,
    t_end: f64,
    lambda: f64,
    taus: &[f64],
) -> Result<RescaledPath<D>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParam(format!("need lambda > 0, got {lambda}")));
    }
    let tau_max = taus.iter().cloned().fold(0.0f64, f64::max);
    if lambda * lambda * tau_max > t_end * (1.0 + 1e-12) {
        return Err(Error::TooShort(format!(
            "rescaled horizon needs microscopic time {:.3} but the run ends at {t_end}",
            lambda * lambda * tau_max
        )));
    }
    let samples = taus
        .iter()
        .map(|&tau| (tau, path(lambda * lambda * tau) * (1.0 / lambda)))
        .collect();
    Ok(RescaledPath { lambda, samples })
}

/// Summary statistics of rescaled increments against the Brownian limit
/// with per-coordinate increment variance `2 kappa dtau` (the process
/// generated by `kappa` times the Laplacian).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub n_increments: usize,
    pub dtau: f64,
    /// z-statistic of the increment mean, per coordinate.
    pub mean_z: Vec<f64>,
    /// sample variance over `2 kappa dtau`, per coordinate.
    pub variance_ratio: Vec<f64>,
    /// KS p-value of standardized increments against the normal, per
    /// coordinate.
    pub ks_p: Vec<f64>,
    /// lag-1 autocorrelation of successive increments within paths, per
    /// coordinate, and its z-statistic.
    pub lag1_corr: Vec<f64>,
    pub lag1_z: Vec<f64>,
}

impl GaussianityReport {
    /// All four checks at the given tolerances: |mean z| < 4, variance ratio
    /// within `variance_tol` of one, KS p above `p_min`, |lag-1 z| < 4.
    pub fn passes(&self, variance_tol: f64, p_min: f64) -> bool {
        self.mean_z.iter().all(|z| z.abs() < 4.0)
            && self.variance_ratio.iter().all(|r| (r - 1.0).abs() < variance_tol)
            && self.ks_p.iter().all(|&p| p > p_min)
            && self.lag1_z.iter().all(|z| z.abs() < 4.0)
    }
}

/// Test rescaled paths against the Brownian limit. Every path must be
/// sampled on the same uniformly spaced tau grid; increments over the
/// disjoint intervals are pooled across paths.
pub fn gaussianity_report<const D: usize>(
    paths: &[RescaledPath<D>],
    kappa: f64,
) -> Result<GaussianityReport> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParam(format!("need kappa > 0, got {kappa}")));
    }
    if paths.is_empty() || paths[0].samples.len() < 2 {
        return Err(Error::TooShort("need paths with at least two samples".into()));
    }
    let taus: Vec<f64> = paths[0].samples.iter().map(|s| s.0).collect();
    let dtau = taus[1] - taus[0];
    if !(dtau > 0.0) {
        return Err(Error::InvalidParam("tau grid must be increasing".into()));
    }
    for p in paths {
        if p.samples.len() != taus.len() {
            return Err(Error::InvalidParam("paths sampled on different tau grids".into()));
        }
        for (s, &t) in p.samples.iter().zip(&taus) {
            if (s.0 - t).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(Error::InvalidParam("paths sampled on different tau grids".into()));
            }
        }
        for w in p.samples.windows(2) {
            if ((w[1].0 - w[0].0) - dtau).abs() > 1e-9 * dtau {
                return Err(Error::InvalidParam("tau grid must be uniformly spaced".into()));
            }
        }
    }
    let scale = (2.0 * kappa * dtau).sqrt();
    let mut mean_z = Vec::with_capacity(D);
    let mut variance_ratio = Vec::with_capacity(D);
    let mut ks_p = Vec::with_capacity(D);
    let mut lag1_corr = Vec::with_capacity(D);
    let mut lag1_z = Vec::with_capacity(D);
    let mut n_increments = 0;
    for axis in 0..D {
        let mut pooled = Vec::new();
        let mut lag_acc = 0.0;
        let mut lag_n = 0usize;
        for p in paths {
            let incs: Vec<f64> =
                p.samples.windows(2).map(|w| w[1].1[axis] - w[0].1[axis]).collect();
            if incs.len() >= 3 {
                lag_acc += stats::lag1_autocorr(&incs) * incs.len() as f64;
                lag_n += incs.len();
            }
            pooled.extend(incs);
        }
        n_increments = pooled.len();
        let m = stats::mean(&pooled);
        let var =
            pooled.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (pooled.len() as f64 - 1.0);
        mean_z.push(m / (var / pooled.len() as f64).sqrt());
        variance_ratio.push(var / (scale * scale));
        let standardized: Vec<f64> = pooled.iter().map(|x| x / scale).collect();
        ks_p.push(stats::ks_test_cdf(&standardized, stats::normal_cdf).p_value);
        let r = if lag_n > 0 { lag_acc / lag_n as f64 } else { 0.0 };
        lag1_corr.push(r);
        lag1_z.push(r * (lag_n as f64).sqrt());
    }
    Ok(GaussianityReport { n_increments, dtau, mean_z, variance_ratio, ks_p, lag1_corr, lag1_z })
}

/// A density on the unit torus represented by finitely many Fourier modes
/// (stored as complex coefficients; the zero mode carries normalization).
#[derive(Clone, Debug)]
pub struct SpectralDensity<const D: usize> {
    /// (wavevector, real part, imaginary part) of each coefficient.
    pub modes: Vec<([i32; D], f64, f64)>,
}

impl<const D: usize> SpectralDensity<D> {
    pub fn uniform() -> Self {
        Self { modes: vec![([0; D], 1.0, 0.0)] }
    }

    /// `1 + amplitude * cos(2 pi k y_axis)` (real, nonnegative for
    /// |amplitude| <= 1).
    pub fn with_cosine(axis: usize, k: i32, amplitude: f64) -> Self {
        let mut plus = [0i32; D];
        plus[axis] = k;
        let mut minus = [0i32; D];
        minus[axis] = -k;
        Self {
            modes: vec![
                ([0; D], 1.0, 0.0),
                (plus, amplitude / 2.0, 0.0),
                (minus, amplitude / 2.0, 0.0),
            ],
        }
    }

    /// Heat-equation evolution: each mode is multiplied by the exact
    /// Fourier multiplier `exp(-kappa |2 pi k|^2 tau)`.
    pub fn evolve(&self, kappa: f64, tau: f64) -> Self {
        let modes = self
            .modes
            .iter()
            .map(|&(k, re, im)| {
                let k2: f64 = k.iter().map(|&a| (a as f64) * (a as f64)).sum();
                let decay = (-kappa * 4.0 * PI * PI * k2 * tau).exp();
                (k, re * decay, im * decay)
            })
            .collect();
        Self { modes }
    }

    pub fn value(&self, y: Vector<D>) -> f64 {
        self.modes
            .iter()
            .map(|&(k, re, im)| {
                let phase: f64 =
                    2.0 * PI * k.iter().zip(0..D).map(|(&ka, a)| ka as f64 * y[a]).sum::<f64>();
                re * phase.cos() - im * phase.sin()
            })
            .sum()
    }

    /// Exact integral over the product bin `prod_a [lo_a, hi_a)`.
    pub fn bin_probability(&self, lo: [f64; D], hi: [f64; D]) -> f64 {
        let mut total = 0.0;
        for &(k, re, im) in &self.modes {
            // prod over axes of the integral of e^{2 pi i k_a y}
            let (mut pre, mut pim) = (1.0f64, 0.0f64);
            for a in 0..D {
                let (ire, iim) = if k[a] == 0 {
                    (hi[a] - lo[a], 0.0)
                } else {
                    let w = 2.0 * PI * k[a] as f64;
                    // (e^{i w hi} - e^{i w lo}) / (i w)
                    let dre = (w * hi[a]).cos() - (w * lo[a]).cos();
                    let dim = (w * hi[a]).sin() - (w * lo[a]).sin();
                    (dim / w, -dre / w)
                };
                let nre = pre * ire - pim * iim;
                let nim = pre * iim + pim * ire;
                pre = nre;
                pim = nim;
            }
            total += re * pre - im * pim;
        }
        total
    }
}

/// Compare an empirical ensemble of rescaled positions at time `tau` with
/// the spectrally evolved heat-equation density: L1 distance between bin
/// probabilities (positions are wrapped to the unit torus; the reference
/// bin masses come from the exact Fourier integrals).
pub fn heat_kernel_compare<const D: usize>(
    rho0: &SpectralDensity<D>,
    positions: &[Vector<D>],
    kappa: f64,
    tau: f64,
    bins_per_axis: usize,
) -> Result<f64> {
    if positions.len() < 10_000 {
        return Err(Error::TooShort(format!(
            "ensemble of {} positions; need at least 10000",
            positions.len()
        )));
    }
    if !(kappa > 0.0) || !(tau >= 0.0) || bins_per_axis < 2 {
        return Err(Error::InvalidParam(format!(
            "need kappa > 0, tau >= 0, bins >= 2; got {kappa}, {tau}, {bins_per_axis}"
        )));
    }
    let evolved = rho0.evolve(kappa, tau);
    let b = bins_per_axis;
    let total_bins = b.pow(D as u32);
    let width = 1.0 / b as f64;
    let mut reference = vec![0.0f64; total_bins];
    for (flat, r) in reference.iter_mut().enumerate() {
        let mut lo = [0.0f64; D];
        let mut hi = [0.0f64; D];
        let mut rem = flat;
        for a in (0..D).rev() {
            let k = rem % b;
            rem /= b;
            lo[a] = k as f64 * width;
            hi[a] = (k + 1) as f64 * width;
        }
        *r = evolved.bin_probability(lo, hi);
    }
    let mut counts = vec![0u64; total_bins];
    for y in positions {
        let mut flat = 0;
        for a in 0..D {
            let frac = y[a] - y[a].floor();
            let k = ((frac / width) as usize).min(b - 1);
            flat = flat * b + k;
        }
        counts[flat] += 1;
    }
    let n = positions.len() as f64;
    Ok(counts.iter().zip(&reference).map(|(&c, &r)| (c as f64 / n - r).abs()).sum())
}

/// Sample from a density of the form `1 + amplitude cos(2 pi y)` on [0, 1)
/// by Newton inversion of its CDF (used to place initial positions for
/// heat-kernel experiments).
pub fn sample_cosine_density(amplitude: f64, rng: &mut impl Rng) -> Result<f64> {
    if amplitude.abs() >= 1.0 {
        return Err(Error::InvalidParam(format!(
            "density 1 + {amplitude} cos is not positive"
        )));
    }
    let u: f64 = rng.random();
    // F(y) = y + amplitude sin(2 pi y) / (2 pi); F' >= 1 - |amplitude| > 0
    let mut y = u;
    for _ in 0..60 {
        let f = y + amplitude * (2.0 * PI * y).sin() / (2.0 * PI) - u;
        let fp = 1.0 + amplitude * (2.0 * PI * y).cos();
        let step = f / fp;
        y -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    Ok(y - y.floor())
}
