//! Mean-squared displacement and the diffusion coefficient it implies, at
//! two levels of description: the full hard-sphere gas and its velocity-jump
//! scaling limit. `run_msd` fits kappa from one level; `run_compare` runs
//! both on a shared absolute time grid and also checks the fitted kappa
//! against the generator's spectral value.

use hsgas::diffusion::{msd_fit, solve_kappa_spectral, DiffusionEstimate, MsdCurve};
use hsgas::geometry::{TorusGeometry, Vector};
use hsgas::lboltz::{assemble_L, JumpProcess, VelocityGrid};
use hsgas::md::{LogMode, SimState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    gas_collision_rate, gas_params, initial_state, jump_collision_rate,
    jump_displacement_ensemble, record_failures, split_seeds, summary_to_notes, time_grid,
    timed_replicas, EstimateRecord, ReplicaFailure, RunError, RunResult, Summary,
};
use crate::config::Resolved;
use crate::manifest::{csv_f64, Check, OutputCtx, RunManifest};

/// One gas replica's all-particle MSD on the sample grid.
struct MdMsd {
    msd: Vec<f64>,
    collisions: u64,
}

/// Mean squared displacement averaged over every particle in one replica.
/// All particles share the tagged particle's law (the equilibrium measure is
/// exchangeable), so the all-particle average is an unbiased estimate of the
/// tagged MSD with far smaller variance than a single tracked particle.
/// Displacements are unwrapped by accumulating minimal-image increments per
/// sample step, which is exact while per-step motion stays below half the
/// torus side (sample spacing of a few mean free times keeps it far below).
fn md_replica_msd<const D: usize>(
    cfg: &Resolved,
    replica: usize,
    seed: u64,
    times: &[f64],
) -> Result<MdMsd, ReplicaFailure<D>> {
    let fail = |message: String, dump| ReplicaFailure { replica, seed, message, dump };
    let params = gas_params::<D>(cfg, seed).map_err(|e| fail(e.message.clone(), None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conf = initial_state(&params, cfg, &mut rng)
        .map_err(|e| fail(format!("equilibrium draw: {e}"), None))?;
    let mut sim = SimState::with_options(&conf, &params, None, LogMode::Off)
        .map_err(|e| fail(format!("initialization: {e}"), Some((conf.clone(), params))))?;

    let n = conf.positions.len();
    let mut prev = conf.positions;
    let mut disp = vec![Vector::<D>([0.0; D]); n];
    let mut msd = Vec::with_capacity(times.len());
    msd.push(0.0);
    for &t in &times[1..] {
        if let Err(e) = sim.run_until(t) {
            let dump = (sim.current_configuration(), params);
            return Err(fail(format!("dynamics at t = {t:.6e}: {e}"), Some(dump)));
        }
        let cur = sim.current_configuration().positions;
        let mut acc = 0.0;
        for i in 0..n {
            disp[i] = disp[i] + params.geom.separation(cur[i], prev[i]);
            acc += disp[i].norm_sq();
        }
        prev = cur;
        msd.push(acc / n as f64);
    }
    Ok(MdMsd { msd, collisions: sim.collision_count() })
}

/// Mean and standard error across replicas at each grid time.
fn across_replica_curve(times: &[f64], per_replica: &[Vec<f64>]) -> hsgas::Result<MsdCurve> {
    let r = per_replica.len() as f64;
    let mut mean = Vec::with_capacity(times.len());
    let mut se = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let vals: Vec<f64> = per_replica.iter().map(|m| m[k]).collect();
        let m = hsgas::stats::mean(&vals);
        let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r - 1.0).max(1.0);
        mean.push(m.max(0.0));
        se.push((var / r).sqrt());
    }
    MsdCurve::new(times.to_vec(), mean, se)
}

/// Gas-level MSD ensemble: curve, per-replica collision counts, failures,
/// and per-replica wall seconds.
#[allow(clippy::type_complexity)]
fn md_ensemble<const D: usize>(
    cfg: &Resolved,
    seeds: &[u64],
    times: &[f64],
) -> Result<(Option<MsdCurve>, Vec<u64>, Vec<ReplicaFailure<D>>, Vec<f64>), RunError> {
    if seeds.len() < 2 {
        return Err(RunError::config(format!(
            "across-replica error bars need at least 2 replicas, got {}",
            seeds.len()
        )));
    }
    let (outcomes, per_replica_secs) =
        timed_replicas(seeds, |r, seed| md_replica_msd::<D>(cfg, r, seed, times));
    let mut curves = Vec::new();
    let mut counts = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(out) => {
                counts.push(out.collisions);
                curves.push(out.msd);
            }
            Err(f) => {
                counts.push(0);
                failures.push(f);
            }
        }
    }
    let curve = if curves.len() >= 2 {
        Some(across_replica_curve(times, &curves).map_err(|e| RunError::config(e.to_string()))?)
    } else {
        None
    };
    Ok((curve, counts, failures, per_replica_secs))
}

/// Jump-process MSD ensemble over independent paths.
fn jump_ensemble_curve<const D: usize>(
    cfg: &Resolved,
    seeds: &[u64],
    times: &[f64],
) -> Result<(MsdCurve, Vec<u64>), RunError> {
    let geom = TorusGeometry::<D>::new(cfg.lambda)
        .map_err(|e| RunError::config(format!("geometry: {e}")))?;
    let process = JumpProcess::<D>::new(cfg.beta, geom)
        .map_err(|e| RunError::config(format!("jump process: {e}")))?;
    let paths = jump_displacement_ensemble(&process, cfg.beta, seeds, times)
        .map_err(|e| RunError::config(format!("jump simulation: {e}")))?;
    let jump_counts: Vec<u64> = paths.iter().map(|p| p.1).collect();
    let displacements: Vec<Vec<Vector<D>>> = paths.into_iter().map(|p| p.0).collect();
    let curve = MsdCurve::from_displacements(times, &displacements)
        .map_err(|e| RunError::config(format!("jump curve: {e}")))?;
    Ok((curve, jump_counts))
}

/// Spectral diffusion coefficient from the discretized velocity generator,
/// using the grid knobs in the analysis section.
pub fn spectral_estimate<const D: usize>(cfg: &Resolved) -> Result<DiffusionEstimate, RunError> {
    let grid = VelocityGrid::<D>::with_cutoff(cfg.beta, cfg.analysis.grid_cutoff, cfg.analysis.grid_half_n)
        .map_err(|e| RunError::config(format!("velocity grid: {e}")))?;
    let op = assemble_L(&grid, cfg.beta, cfg.analysis.angular_order)
        .map_err(|e| RunError::config(format!("generator assembly: {e}")))?;
    solve_kappa_spectral(&op).map_err(|e| RunError::config(format!("spectral solve: {e}")))
}

fn fit_checks(manifest: &mut RunManifest, label: &str, est: &DiffusionEstimate) {
    manifest.checks.push(Check::new(
        &format!("{label}-linear"),
        !est.nonlinear_warning,
        est.provenance.clone(),
    ));
    manifest.checks.push(Check::new(
        &format!("{label}-kappa-positive"),
        est.kappa > 0.0,
        format!("kappa {:.6e}, 95% interval ({:.6e}, {:.6e})", est.kappa, est.ci.0, est.ci.1),
    ));
}

pub fn run_msd<const D: usize>(cfg: &Resolved, mut ctx: OutputCtx) -> RunResult {
    let start = std::time::Instant::now();
    let level = cfg.analysis.level.as_str();
    let rate = match level {
        "jump" => jump_collision_rate::<D>(cfg)?,
        _ => gas_collision_rate::<D>(cfg)?,
    };
    let mft = 1.0 / rate;
    let sample_dt = cfg.analysis.sample_dt_mft * mft;
    let t_end = cfg.analysis.window_mft[1] * mft;
    let times = time_grid(sample_dt, t_end);
    let window = (cfg.analysis.window_mft[0] * mft, cfg.analysis.window_mft[1] * mft);

    let mut manifest = RunManifest::new(cfg);
    let mut per_replica_secs = Vec::new();
    let curve = match level {
        "jump" => {
            let seeds = hsgas::ensemble::replica_seeds(cfg.base_seed, cfg.analysis.jump_replicas)
                .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;
            manifest.seeds = seeds.clone();
            let (curve, jump_counts) = jump_ensemble_curve::<D>(cfg, &seeds, &times)?;
            manifest.event_counts = jump_counts;
            curve
        }
        _ => {
            gas_params::<D>(cfg, cfg.base_seed)?; // reject bad gas parameters up front
            let seeds = hsgas::ensemble::replica_seeds(cfg.base_seed, cfg.replicas)
                .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;
            manifest.seeds = seeds.clone();
            let (curve, counts, failures, secs) = md_ensemble::<D>(cfg, &seeds, &times)?;
            manifest.event_counts = counts;
            per_replica_secs = secs;
            record_failures(&failures, &mut ctx, &mut manifest)?;
            curve.ok_or_else(|| RunError::config("too few surviving replicas for a curve".to_string()))?
        }
    };

    let mut summary: Summary = Vec::new();
    let mut records = Vec::new();
    match msd_fit::<D>(&curve, window, mft) {
        Ok(est) => {
            fit_checks(&mut manifest, "fit", &est);
            summary.push(("kappa".to_string(), est.kappa));
            summary.push(("kappa_ci_halfwidth".to_string(), (est.ci.1 - est.ci.0) / 2.0));
            records.push(EstimateRecord::new(
                &est,
                json!({
                    "level": level,
                    "window_mft": cfg.analysis.window_mft,
                    "sample_dt_mft": cfg.analysis.sample_dt_mft,
                    "mean_free_time": mft,
                }),
            ));
        }
        Err(e) => {
            manifest.checks.push(Check::new("fit-linear", false, format!("fit failed: {e}")));
        }
    }

    manifest.notes.push(format!(
        "level {level}: mean free time {mft:.6e}, grid of {} samples to {t_end:.6e}",
        times.len()
    ));
    manifest.notes.push(format!(
        "fit window [{:.6e}, {:.6e}] (= window_mft x mean free time)",
        window.0, window.1
    ));
    if level != "jump" {
        manifest.notes.push(
            "gas-level curve averages squared displacement over all particles (exchangeable \
             equilibrium ensemble), then over replicas"
                .to_string(),
        );
    }
    summary_to_notes(&summary, &mut manifest);

    let rows: Vec<String> = (0..curve.times.len())
        .map(|k| {
            format!(
                "{},{},{},{}",
                csv_f64(curve.times[k]),
                csv_f64(curve.times[k] / mft),
                csv_f64(curve.msd[k]),
                csv_f64(curve.stderr[k])
            )
        })
        .collect();
    ctx.write_csv("msd.csv", "t,t_mft,msd,stderr", &rows)?;
    ctx.write_json("kappa.json", &records)?;

    let timings = super::make_timings(start, per_replica_secs);
    ctx.finish(manifest, timings).map_err(RunError::config)
}

pub fn run_compare<const D: usize>(cfg: &Resolved, mut ctx: OutputCtx) -> RunResult {
    let start = std::time::Instant::now();
    let rate = gas_collision_rate::<D>(cfg)?;
    let mft = 1.0 / rate;
    let sample_dt = cfg.analysis.sample_dt_mft * mft;
    let t_end = cfg.analysis.window_mft[1] * mft;
    let times = time_grid(sample_dt, t_end);
    let window = (cfg.analysis.window_mft[0] * mft, cfg.analysis.window_mft[1] * mft);

    gas_params::<D>(cfg, cfg.base_seed)?;
    let (md_seeds, jump_seeds) = split_seeds(cfg.base_seed, cfg.replicas, cfg.analysis.jump_replicas)?;

    let mut manifest = RunManifest::new(cfg);
    manifest.seeds = md_seeds.clone();

    let (md_curve, counts, failures, per_replica_secs) = md_ensemble::<D>(cfg, &md_seeds, &times)?;
    manifest.event_counts = counts;
    record_failures(&failures, &mut ctx, &mut manifest)?;
    let md_curve = md_curve
        .ok_or_else(|| RunError::config("too few surviving replicas for a curve".to_string()))?;

    let (jump_curve, jump_counts) = jump_ensemble_curve::<D>(cfg, &jump_seeds, &times)?;
    let total_jumps: u64 = jump_counts.iter().sum();

    // Pointwise agreement over the diffusive window (both curves vanish at
    // t = 0, and the ballistic regime is excluded by construction).
    let mut max_rel = 0.0f64;
    let mut rel_devs = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let rel = if times[k] >= window.0 {
            let r = (md_curve.msd[k] - jump_curve.msd[k]).abs() / jump_curve.msd[k].abs().max(f64::MIN_POSITIVE);
            max_rel = max_rel.max(r);
            r
        } else {
            f64::NAN
        };
        rel_devs.push(rel);
    }
    manifest.checks.push(Check::new(
        "msd-agreement",
        max_rel <= cfg.analysis.tolerance,
        format!(
            "largest relative gap between levels over the window: {max_rel:.4} (cap {})",
            cfg.analysis.tolerance
        ),
    ));

    let mut summary: Summary = vec![("max_rel_dev".to_string(), max_rel)];
    let mut records = Vec::new();

    let spectral = spectral_estimate::<D>(cfg)?;
    summary.push(("kappa_spectral".to_string(), spectral.kappa));
    records.push(EstimateRecord::new(
        &spectral,
        json!({
            "grid_half_n": cfg.analysis.grid_half_n,
            "angular_order": cfg.analysis.angular_order,
            "grid_cutoff": cfg.analysis.grid_cutoff,
        }),
    ));

    for (label, curve) in [("md-fit", &md_curve), ("jump-fit", &jump_curve)] {
        match msd_fit::<D>(curve, window, mft) {
            Ok(est) => {
                fit_checks(&mut manifest, label, &est);
                manifest.checks.push(super::relative_check(
                    &format!("{label}-vs-spectral"),
                    est.kappa,
                    spectral.kappa,
                    cfg.analysis.tolerance,
                ));
                summary.push((format!("kappa_{}", label.replace('-', "_")), est.kappa));
                records.push(EstimateRecord::new(
                    &est,
                    json!({
                        "level": if label == "md-fit" { "md" } else { "jump" },
                        "window_mft": cfg.analysis.window_mft,
                        "sample_dt_mft": cfg.analysis.sample_dt_mft,
                        "mean_free_time": mft,
                    }),
                ));
            }
            Err(e) => {
                manifest
                    .checks
                    .push(Check::new(&format!("{label}-linear"), false, format!("fit failed: {e}")));
            }
        }
    }

    manifest.notes.push(format!(
        "shared absolute grid of {} samples to {t_end:.6e}; gas mean free time {mft:.6e}",
        times.len()
    ));
    manifest.notes.push(format!(
        "jump side: {} independent paths, {total_jumps} jumps in total",
        jump_seeds.len()
    ));
    manifest.notes.push(
        "the jump process uses unit partner density, so its rate differs from the finite gas \
         by the factor (N-1)/N absorbed here into the shared grid"
            .to_string(),
    );
    summary_to_notes(&summary, &mut manifest);

    let rows: Vec<String> = (0..times.len())
        .map(|k| {
            format!(
                "{},{},{},{},{},{},{}",
                csv_f64(times[k]),
                csv_f64(times[k] / mft),
                csv_f64(md_curve.msd[k]),
                csv_f64(md_curve.stderr[k]),
                csv_f64(jump_curve.msd[k]),
                csv_f64(jump_curve.stderr[k]),
                if rel_devs[k].is_nan() { String::new() } else { csv_f64(rel_devs[k]) }
            )
        })
        .collect();
    ctx.write_csv("compare.csv", "t,t_mft,msd_md,se_md,msd_jump,se_jump,rel_dev", &rows)?;
    ctx.write_json("kappa.json", &records)?;

    let timings = super::make_timings(start, per_replica_secs);
    ctx.finish(manifest, timings).map_err(RunError::config)
}
