//! Diffusion coefficient by three independent routes — spectral solve of the
//! velocity generator, Green-Kubo integration of the velocity
//! autocorrelation, and an MSD fit — plus exactly solvable cross-checks of
//! the linear algebra (dense LU vs conjugate gradients, and a relaxation
//! generator whose inverse is closed-form).

use hsgas::diffusion::{
    green_kubo_kappa, msd_fit, solve_kappa_dense, solve_kappa_spectral, DiffusionEstimate,
    MsdCurve,
};
use hsgas::geometry::{TorusGeometry, Vector};
use hsgas::lboltz::{assemble_L, mean_jump_rate, simulate_jump_process, JumpProcess, OperatorL, VelocityGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    jump_collision_rate, summary_to_notes, time_grid, timed_replicas, EstimateRecord,
    relative_check, RunError, RunResult, Summary,
};
use crate::config::Resolved;
use crate::manifest::{csv_f64, Check, OutputCtx, RunManifest};

/// Dense and iterative solves must agree to this relative gap.
const DENSE_RTOL: f64 = 1e-8;
/// The relaxation generator's kappa vs its continuum closed form (limited by
/// the quadrature grid, not the solver).
const RELAXATION_CONTINUUM_RTOL: f64 = 1e-6;
/// The relaxation generator's kappa vs the same grid's second moment (pure
/// linear algebra; must hold to solver precision).
const RELAXATION_GRID_RTOL: f64 = 1e-10;

struct PathSample<const D: usize> {
    velocities: Vec<Vector<D>>,
    displacements: Vec<Vector<D>>,
    jumps: u64,
}

pub fn run<const D: usize>(cfg: &Resolved, mut ctx: OutputCtx) -> RunResult {
    let start = std::time::Instant::now();
    let rate = jump_collision_rate::<D>(cfg)?;
    let mft = 1.0 / rate;
    let t_end = cfg.analysis.t_end_mft * mft;
    let gk_dt = cfg.analysis.gk_dt;
    let msd_times = time_grid(cfg.analysis.sample_dt_mft * mft, cfg.analysis.window_mft[1] * mft);
    let window = (cfg.analysis.window_mft[0] * mft, cfg.analysis.window_mft[1] * mft);
    if *msd_times.last().unwrap() > t_end {
        return Err(RunError::config(format!(
            "analysis.window_mft ends at {} mean free times but t_end_mft is {}",
            cfg.analysis.window_mft[1], cfg.analysis.t_end_mft
        )));
    }

    let mut manifest = RunManifest::new(cfg);
    let mut summary: Summary = Vec::new();
    let mut records = Vec::new();

    // --- Route 1: spectral solve of the discretized generator, with a dense
    // LU factorization of the same matrix as an independent linear-algebra
    // cross-check.
    let grid =
        VelocityGrid::<D>::with_cutoff(cfg.beta, cfg.analysis.grid_cutoff, cfg.analysis.grid_half_n)
            .map_err(|e| RunError::config(format!("velocity grid: {e}")))?;
    let op = assemble_L(&grid, cfg.beta, cfg.analysis.angular_order)
        .map_err(|e| RunError::config(format!("generator assembly: {e}")))?;
    let spectral =
        solve_kappa_spectral(&op).map_err(|e| RunError::config(format!("spectral solve: {e}")))?;
    let dense =
        solve_kappa_dense(&op).map_err(|e| RunError::config(format!("dense solve: {e}")))?;
    manifest.checks.push(relative_check(
        "spectral-vs-dense",
        spectral.kappa,
        dense,
        DENSE_RTOL,
    ));
    records.push(EstimateRecord::new(
        &spectral,
        json!({
            "grid_half_n": cfg.analysis.grid_half_n,
            "angular_order": cfg.analysis.angular_order,
            "grid_cutoff": cfg.analysis.grid_cutoff,
            "truncation_mass": op.truncation_mass,
            "dense_cross_check": dense,
        }),
    ));
    summary.push(("kappa_spectral".to_string(), spectral.kappa));

    // --- Exactly solvable control: the relaxation generator
    // `L phi = -nu0 (phi - <phi>)` has `(-L)^{-1} v = v / nu0`, so kappa is
    // the grid second moment over `d nu0` (continuum value `1/(beta nu0)`).
    let nu0 = if cfg.analysis.relaxation_rate > 0.0 {
        cfg.analysis.relaxation_rate
    } else {
        mean_jump_rate::<D>(cfg.beta).map_err(|e| RunError::config(e.to_string()))?
    };
    let relax_op = OperatorL::relaxation(&grid, nu0)
        .map_err(|e| RunError::config(format!("relaxation generator: {e}")))?;
    let relax = solve_kappa_spectral(&relax_op)
        .map_err(|e| RunError::config(format!("relaxation solve: {e}")))?;
    let grid_moment: f64 = grid
        .mass
        .iter()
        .zip(&grid.nodes)
        .map(|(&m, v)| m * v.norm_sq())
        .sum::<f64>()
        / (D as f64 * nu0);
    let continuum = 1.0 / (cfg.beta * nu0);
    manifest.checks.push(relative_check(
        "relaxation-vs-closed-form",
        relax.kappa,
        continuum,
        RELAXATION_CONTINUUM_RTOL,
    ));
    manifest.checks.push(relative_check(
        "relaxation-vs-grid-moment",
        relax.kappa,
        grid_moment,
        RELAXATION_GRID_RTOL,
    ));
    manifest.notes.push(format!(
        "relaxation control at nu0 {nu0:.6e}: solver {:.12e}, grid moment {grid_moment:.12e}, \
         continuum {continuum:.12e}",
        relax.kappa
    ));

    // --- Routes 2 and 3 share one jump-process ensemble: each path is
    // sampled densely for the velocity autocorrelation and on the coarse
    // grid for displacements.
    let geom = TorusGeometry::<D>::new(cfg.lambda)
        .map_err(|e| RunError::config(format!("geometry: {e}")))?;
    let process = JumpProcess::<D>::new(cfg.beta, geom)
        .map_err(|e| RunError::config(format!("jump process: {e}")))?;
    let seeds = hsgas::ensemble::replica_seeds(cfg.base_seed, cfg.analysis.jump_replicas)
        .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;
    manifest.seeds = seeds.clone();
    let gk_steps = (t_end / gk_dt).floor() as usize;
    if gk_steps < 80 {
        return Err(RunError::config(format!(
            "only {gk_steps} velocity samples per path; raise t_end_mft or lower gk_dt"
        )));
    }
    let x0 = Vector::<D>::from_fn(|_| 0.5 * cfg.lambda);
    let (outcomes, per_replica_secs) = timed_replicas(&seeds, |_, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v0 = hsgas::init::sample_maxwellian::<D, _>(cfg.beta, &mut rng);
        simulate_jump_process(&process, x0, v0, t_end, &mut rng).map(|traj| {
            let velocities = (0..=gk_steps).map(|k| traj.velocity_at(k as f64 * gk_dt)).collect();
            let origin = traj.position_unwrapped_at(0.0);
            let displacements =
                msd_times.iter().map(|&t| traj.position_unwrapped_at(t) - origin).collect();
            PathSample { velocities, displacements, jumps: traj.jump_count() as u64 }
        })
    });
    let mut paths = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(p) => paths.push(p),
            Err(e) => return Err(RunError::config(format!("jump simulation: {e}"))),
        }
    }
    manifest.event_counts = paths.iter().map(|p| p.jumps).collect();

    let vel_series: Vec<Vec<Vector<D>>> = paths.iter().map(|p| p.velocities.clone()).collect();
    let displacements: Vec<Vec<Vector<D>>> =
        paths.iter().map(|p| p.displacements.clone()).collect();
    drop(paths);

    let gk = green_kubo_kappa(&vel_series, gk_dt, rate)
        .map_err(|e| RunError::config(format!("green-kubo: {e}")))?;
    records.push(EstimateRecord::new(
        &gk,
        json!({
            "gk_dt": gk_dt,
            "paths": cfg.analysis.jump_replicas,
            "t_end_mft": cfg.analysis.t_end_mft,
        }),
    ));
    summary.push(("kappa_green_kubo".to_string(), gk.kappa));

    let curve = MsdCurve::from_displacements(&msd_times, &displacements)
        .map_err(|e| RunError::config(format!("msd curve: {e}")))?;
    let fit = msd_fit::<D>(&curve, window, mft)
        .map_err(|e| RunError::config(format!("msd fit: {e}")))?;
    manifest.checks.push(Check::new("fit-linear", !fit.nonlinear_warning, fit.provenance.clone()));
    records.push(EstimateRecord::new(
        &fit,
        json!({
            "level": "jump",
            "window_mft": cfg.analysis.window_mft,
            "sample_dt_mft": cfg.analysis.sample_dt_mft,
            "mean_free_time": mft,
        }),
    ));
    summary.push(("kappa_msd".to_string(), fit.kappa));

    // --- The three routes must agree pairwise.
    let tol = cfg.analysis.tolerance;
    let pairs = [
        ("spectral-vs-green-kubo", gk.kappa, spectral.kappa),
        ("spectral-vs-msd", fit.kappa, spectral.kappa),
        ("green-kubo-vs-msd", fit.kappa, gk.kappa),
    ];
    let mut max_pair = 0.0f64;
    for (name, a, b) in pairs {
        max_pair = max_pair.max((a - b).abs() / b.abs());
        manifest.checks.push(relative_check(name, a, b, tol));
    }
    summary.push(("max_pairwise_rel".to_string(), max_pair));

    manifest.notes.push(format!(
        "jump mean free time {mft:.6e}; horizon {t_end:.6e} = {} mean free times; velocity \
         samples every {gk_dt} time units",
        cfg.analysis.t_end_mft
    ));
    summary_to_notes(&summary, &mut manifest);

    let estimates: Vec<(&str, &DiffusionEstimate)> =
        vec![("spectral", &spectral), ("green-kubo", &gk), ("msd-fit", &fit)];
    let rows: Vec<String> = estimates
        .iter()
        .map(|(name, e)| {
            format!(
                "{name},{},{},{},{}",
                csv_f64(e.kappa),
                csv_f64(e.ci.0),
                csv_f64(e.ci.1),
                e.nonlinear_warning
            )
        })
        .collect();
    ctx.write_csv("kappa.csv", "method,kappa,ci_lo,ci_hi,nonlinear_warning", &rows)?;
    ctx.write_json("kappa.json", &records)?;

    let timings = super::make_timings(start, per_replica_secs);
    ctx.finish(manifest, timings).map_err(RunError::config)
}
