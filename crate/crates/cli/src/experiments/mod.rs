//! Experiment drivers. Each takes the resolved config plus an output context,
//! runs its replica ensemble, writes result files, and returns a manifest
//! whose checks decide the process exit code.

pub mod equilibrium;
pub mod heat;
pub mod kappa;
pub mod lemma_exp;
pub mod msd;
pub mod sweep;
pub mod trees_exp;

use hsgas::geometry::Vector;
use hsgas::init::{sample_equilibrium, Configuration, GasParameters};
use hsgas::lboltz::{mean_jump_rate, simulate_jump_process, JumpProcess};
use hsgas::stats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Resolved;
use crate::manifest::{Check, OutputCtx, RunManifest, Timings};

pub struct RunError {
    pub message: String,
    /// True when the failure is a bad configuration or environment rather
    /// than a violated physical invariant.
    pub config_class: bool,
}

impl RunError {
    pub fn config(message: impl Into<String>) -> Self {
        RunError { message: message.into(), config_class: true }
    }
}

impl From<String> for RunError {
    fn from(message: String) -> Self {
        RunError { message, config_class: true }
    }
}

pub type RunResult = Result<RunManifest, RunError>;

pub fn dispatch<const D: usize>(cfg: &Resolved, ctx: OutputCtx) -> RunResult {
    match cfg.experiment.as_str() {
        "equilibrium-check" => equilibrium::run::<D>(cfg, ctx),
        "msd" => msd::run_msd::<D>(cfg, ctx),
        "compare-levels" => msd::run_compare::<D>(cfg, ctx),
        "kappa" => kappa::run::<D>(cfg, ctx),
        "trees" => trees_exp::run::<D>(cfg, ctx),
        "lemma" => lemma_exp::run::<D>(cfg, ctx),
        "heat" => heat::run::<D>(cfg, ctx),
        "sweep" => sweep::run::<D>(cfg, ctx),
        other => Err(RunError::config(format!("unknown experiment \"{other}\""))),
    }
}

pub fn gas_params<const D: usize>(cfg: &Resolved, seed: u64) -> Result<GasParameters<D>, RunError> {
    GasParameters::<D>::new(cfg.n, cfg.eps, cfg.lambda, cfg.beta, seed)
        .map_err(|e| RunError::config(format!("gas parameters: {e}")))
}

/// Equilibrium per-particle collision rate of the finite gas: the mean
/// relative-speed kernel scaled by the partner density (N-1) eps^(d-1) / L^d.
pub fn gas_collision_rate<const D: usize>(cfg: &Resolved) -> Result<f64, RunError> {
    let kernel = mean_jump_rate::<D>(cfg.beta)
        .map_err(|e| RunError::config(format!("rate quadrature: {e}")))?;
    Ok(kernel * (cfg.n as f64 - 1.0).max(1.0) * cfg.eps.powi(D as i32 - 1)
        / cfg.lambda.powi(D as i32))
}

/// Jump rate of the scaling-limit process (partner density exactly one).
pub fn jump_collision_rate<const D: usize>(cfg: &Resolved) -> Result<f64, RunError> {
    mean_jump_rate::<D>(cfg.beta).map_err(|e| RunError::config(format!("rate quadrature: {e}")))
}

/// Draw an equilibrium state and apply the configured velocity shift.
pub fn initial_state<const D: usize>(
    params: &GasParameters<D>,
    cfg: &Resolved,
    rng: &mut ChaCha8Rng,
) -> hsgas::Result<Configuration<D>> {
    let mut conf = sample_equilibrium(params, rng)?;
    let shift = &cfg.initial.velocity_shift;
    if shift.iter().any(|u| *u != 0.0) {
        let u = Vector::<D>::from_fn(|a| shift[a]);
        for v in &mut conf.velocities {
            *v = *v + u;
        }
    }
    Ok(conf)
}

/// One failed replica: what went wrong and the state to dump for forensics.
pub struct ReplicaFailure<const D: usize> {
    pub replica: usize,
    pub seed: u64,
    pub message: String,
    pub dump: Option<(Configuration<D>, GasParameters<D>)>,
}

/// Record failures in the manifest (one failed check per replica, with a
/// state-dump file when a configuration was captured).
pub fn record_failures<const D: usize>(
    failures: &[ReplicaFailure<D>],
    ctx: &mut OutputCtx,
    manifest: &mut RunManifest,
) -> Result<(), String> {
    for f in failures {
        let mut observed = format!("seed {}: {}", f.seed, f.message);
        if let Some((conf, params)) = &f.dump {
            let name = format!("replica-{:03}-state.txt", f.replica);
            let mut text = Vec::new();
            if hsgas::init::write_snapshot(&mut text, conf, params).is_ok() {
                ctx.write_text(&name, &String::from_utf8_lossy(&text))?;
                observed.push_str(&format!(" (state dump: {name})"));
            }
        }
        manifest.checks.push(Check::new(
            &format!("replica-{:03}-completed", f.replica),
            false,
            observed,
        ));
    }
    Ok(())
}

/// Upper-quartile point of the standard normal; velocity axes are split into
/// four equal-probability bins at {-q, 0, +q}/sqrt(beta).
const NORMAL_QUARTILE: f64 = 0.674_489_750_196_081_7;

/// Compare the empirical tagged phase-space histogram against the invariant
/// one-particle law (uniform position x Maxwellian velocity). Position axes
/// are halved and velocity axes quartiled, so every product cell carries
/// identical probability; the check fails if any cell exceeds its expectation
/// by more than four sampling standard deviations.
pub fn max_principle_check<const D: usize>(
    samples: &[(Vector<D>, Vector<D>)],
    lambda: f64,
    beta: f64,
) -> Check {
    if samples.len() < 100 {
        return Check::new(
            "max-principle",
            true,
            format!("skipped: {} samples is too few to bin", samples.len()),
        );
    }
    let q = NORMAL_QUARTILE / beta.sqrt();
    let cells = 8usize.pow(D as u32);
    let mut counts = vec![0u64; cells];
    for (x, v) in samples {
        let mut idx = 0usize;
        for a in 0..D {
            let pos_half = if x[a].rem_euclid(lambda) < lambda / 2.0 { 0 } else { 1 };
            let vel_quartile = if v[a] < -q {
                0
            } else if v[a] < 0.0 {
                1
            } else if v[a] < q {
                2
            } else {
                3
            };
            idx = idx * 8 + pos_half * 4 + vel_quartile;
        }
        counts[idx] += 1;
    }
    let n = samples.len() as f64;
    let p = 1.0 / cells as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let z_max = counts.iter().map(|&c| (c as f64 - n * p) / sigma).fold(f64::NEG_INFINITY, f64::max);
    Check::new(
        "max-principle",
        z_max <= 4.0,
        format!(
            "largest cell excess {z_max:.3} sampling std devs ({} cells, {} samples, cap 4)",
            cells,
            samples.len()
        ),
    )
}

/// Uniformly spaced sample times 0, dt, 2 dt, ..., covering `t_end`.
pub fn time_grid(dt: f64, t_end: f64) -> Vec<f64> {
    let steps = (t_end / dt).ceil().max(1.0) as usize;
    (0..=steps).map(|k| k as f64 * dt).collect()
}

/// Jump-process paths: unwrapped displacements at the given times plus the
/// jump count, one entry per path. Initial positions are the torus center
/// (displacements do not depend on the start point).
pub fn jump_displacement_ensemble<const D: usize>(
    process: &JumpProcess<D>,
    beta: f64,
    seeds: &[u64],
    times: &[f64],
) -> hsgas::Result<Vec<(Vec<Vector<D>>, u64)>> {
    let t_end = *times.last().expect("nonempty time grid");
    let x0 = Vector::<D>::from_fn(|_| 0.5 * process.geom.side());
    let results = hsgas::ensemble::map_replicas(seeds, |_, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v0 = hsgas::init::sample_maxwellian::<D, _>(beta, &mut rng);
        simulate_jump_process(process, x0, v0, t_end, &mut rng).map(|traj| {
            let origin = traj.position_unwrapped_at(0.0);
            let disp: Vec<Vector<D>> =
                times.iter().map(|&t| traj.position_unwrapped_at(t) - origin).collect();
            (disp, traj.jump_count() as u64)
        })
    });
    results.into_iter().collect()
}

/// A diffusion estimate plus the knobs that produced it, for the JSON output.
#[derive(Serialize)]
pub struct EstimateRecord {
    pub kappa: f64,
    pub ci: (f64, f64),
    pub method: hsgas::diffusion::KappaMethod,
    pub raw_signed: f64,
    pub nonlinear_warning: bool,
    pub provenance: String,
    pub parameters: serde_json::Value,
}

impl EstimateRecord {
    pub fn new(est: &hsgas::diffusion::DiffusionEstimate, parameters: serde_json::Value) -> Self {
        EstimateRecord {
            kappa: est.kappa,
            ci: est.ci,
            method: est.method,
            raw_signed: est.raw_signed,
            nonlinear_warning: est.nonlinear_warning,
            provenance: est.provenance.clone(),
            parameters,
        }
    }
}

/// Relative closeness check between two positive estimates.
pub fn relative_check(name: &str, a: f64, b: f64, tol: f64) -> Check {
    let rel = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    Check::new(name, rel <= tol, format!("{a:.6e} vs {b:.6e}: relative gap {rel:.4} (cap {tol})"))
}

/// Run closures over the replica seeds with wall-clock timing per replica.
pub fn timed_replicas<T: Send>(
    seeds: &[u64],
    f: impl Fn(usize, u64) -> T + Sync,
) -> (Vec<T>, Vec<f64>) {
    let wrapped: Vec<(T, f64)> = hsgas::ensemble::map_replicas(seeds, |i, s| {
        let start = std::time::Instant::now();
        let out = f(i, s);
        (out, start.elapsed().as_secs_f64())
    });
    let mut outs = Vec::with_capacity(wrapped.len());
    let mut times = Vec::with_capacity(wrapped.len());
    for (o, t) in wrapped {
        outs.push(o);
        times.push(t);
    }
    (outs, times)
}

pub fn make_timings(start: std::time::Instant, per_replica: Vec<f64>) -> Timings {
    Timings { total_seconds: start.elapsed().as_secs_f64(), per_replica_seconds: per_replica }
}

/// Seeds for an auxiliary ensemble (for example the jump-process side of a
/// two-level comparison), disjoint from the primary replica seeds by
/// construction: both come from one call over the combined index range.
pub fn split_seeds(base: u64, primary: usize, auxiliary: usize) -> Result<(Vec<u64>, Vec<u64>), RunError> {
    let all = hsgas::ensemble::replica_seeds(base, primary + auxiliary)
        .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;
    let aux = all[primary..].to_vec();
    let mut main = all;
    main.truncate(primary);
    Ok((main, aux))
}

/// Summary metrics exposed to sweeps: (metric name, value).
pub type Summary = Vec<(String, f64)>;

/// Pull a uniform random point on the torus of the given side.
pub fn uniform_point<const D: usize>(side: f64, rng: &mut impl Rng) -> Vector<D> {
    Vector::from_fn(|_| side * rng.random::<f64>())
}

/// Stash the per-experiment summary in the manifest notes so sweeps can
/// recover it without re-parsing result files.
pub fn summary_to_notes(summary: &Summary, manifest: &mut RunManifest) {
    for (name, value) in summary {
        manifest.notes.push(format!("summary {name} = {value:.10e}"));
    }
}

/// Recover a summary from manifest notes written by `summary_to_notes`.
pub fn summary_from_notes(notes: &[String]) -> Summary {
    let mut out = Vec::new();
    for note in notes {
        if let Some(rest) = note.strip_prefix("summary ") {
            if let Some((name, value)) = rest.split_once(" = ") {
                if let Ok(v) = value.parse::<f64>() {
                    out.push((name.to_string(), v));
                }
            }
        }
    }
    out
}

/// Deterministic seed for a derived run (sweep points), distinct per index.
pub fn derived_base_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Standard-normal KS p-value of pooled, beta-scaled velocity components.
pub fn velocity_ks_p<const D: usize>(velocities: &[Vector<D>], beta: f64) -> f64 {
    let scale = beta.sqrt();
    let mut comps = Vec::with_capacity(velocities.len() * D);
    for v in velocities {
        for a in 0..D {
            comps.push(v[a] * scale);
        }
    }
    stats::ks_test_cdf(&comps, stats::normal_cdf).p_value
}
