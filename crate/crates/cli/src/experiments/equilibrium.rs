//! Equilibrium health check: run an ensemble of gas replicas from equilibrium
//! draws and verify conservation, hard-core exclusion, velocity stationarity,
//! the collision frequency against its kernel prediction, and the tagged
//! phase-space histogram against the invariant one-particle law.

use hsgas::geometry::Vector;
use hsgas::md::{LogMode, SimState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    gas_collision_rate, gas_params, initial_state, max_principle_check, record_failures,
    summary_to_notes, timed_replicas, velocity_ks_p, ReplicaFailure, RunError, RunResult,
};
use crate::config::Resolved;
use crate::manifest::{csv_f64, Check, OutputCtx, RunManifest};

/// Relative drift allowed in total momentum and energy over a full run.
pub const DRIFT_TOL: f64 = 1e-8;
/// Pair separations may undershoot the sphere diameter by at most this
/// relative contact slack.
pub const OVERLAP_RTOL: f64 = 1e-9;
/// Per-replica KS threshold and the fraction of replicas that must clear it.
pub const KS_P_MIN: f64 = 0.01;
pub const KS_PASS_FRACTION: f64 = 0.95;
/// Collision totals below this make the frequency ratio meaningless; the
/// check degrades to informational.
const MIN_COLLISIONS_FOR_RATE: u64 = 100;

#[derive(Serialize)]
struct ReplicaRow {
    replica: usize,
    seed: u64,
    collisions: u64,
    events: u64,
    momentum_drift: f64,
    energy_drift: f64,
    min_pair_distance: f64,
    ks_p: f64,
    collision_frequency: f64,
}

struct ReplicaOut<const D: usize> {
    row: ReplicaRow,
    monitor: Vec<(Vector<D>, Vector<D>)>,
}

pub fn run<const D: usize>(cfg: &Resolved, mut ctx: OutputCtx) -> RunResult {
    let start = std::time::Instant::now();
    let rate = gas_collision_rate::<D>(cfg)?;
    let mft = 1.0 / rate;
    let t_end = cfg.analysis.t_end_mft * mft;
    let sample_dt = cfg.analysis.sample_dt_mft * mft;
    let seeds = hsgas::ensemble::replica_seeds(cfg.base_seed, cfg.replicas)
        .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;
    gas_params::<D>(cfg, cfg.base_seed)?; // reject bad gas parameters up front

    let (outcomes, per_replica) = timed_replicas(&seeds, |r, seed| -> Result<ReplicaOut<D>, ReplicaFailure<D>> {
        let fail = |message: String, dump| ReplicaFailure { replica: r, seed, message, dump };
        let params = gas_params::<D>(cfg, seed).map_err(|e| fail(e.message.clone(), None))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conf = initial_state(&params, cfg, &mut rng)
            .map_err(|e| fail(format!("equilibrium draw: {e}"), None))?;
        let mut sim = SimState::with_options(&conf, &params, None, LogMode::Off)
            .map_err(|e| fail(format!("initialization: {e}"), Some((conf.clone(), params))))?;

        let steps = ((t_end / sample_dt).ceil() as usize).max(1);
        let pair_check_every = (steps / 8).max(1);
        let mut monitor = Vec::with_capacity(steps + 1);
        let mut min_pair = f64::INFINITY;
        for k in 1..=steps {
            let target = (k as f64 * sample_dt).min(t_end);
            if let Err(e) = sim.run_until(target) {
                let dump = (sim.current_configuration(), params);
                return Err(fail(format!("dynamics at t = {target:.6e}: {e}"), Some(dump)));
            }
            let (_, x, v) = sim.tagged_state();
            monitor.push((params.geom.wrap(x), v));
            if k % pair_check_every == 0 || k == steps {
                min_pair = min_pair.min(sim.min_pair_distance_now());
            }
        }
        let report = sim.conservation_report();
        let end = sim.current_configuration();
        let row = ReplicaRow {
            replica: r,
            seed,
            collisions: sim.collision_count(),
            events: sim.processed_events(),
            momentum_drift: report.momentum_drift,
            energy_drift: report.energy_drift,
            min_pair_distance: min_pair,
            ks_p: velocity_ks_p(&end.velocities, cfg.beta),
            collision_frequency: sim.collision_frequency(),
        };
        Ok(ReplicaOut { row, monitor })
    });

    let mut manifest = RunManifest::new(cfg);
    manifest.seeds = seeds;

    let mut rows = Vec::new();
    let mut monitor = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(out) => {
                manifest.event_counts.push(out.row.collisions);
                monitor.extend(out.monitor);
                rows.push(out.row);
            }
            Err(f) => {
                manifest.event_counts.push(0);
                failures.push(f);
            }
        }
    }
    record_failures(&failures, &mut ctx, &mut manifest)?;

    if !rows.is_empty() {
        let worst_p = rows.iter().map(|r| r.momentum_drift).fold(0.0f64, f64::max);
        let worst_e = rows.iter().map(|r| r.energy_drift).fold(0.0f64, f64::max);
        manifest.checks.push(Check::new(
            "conservation-momentum",
            worst_p <= DRIFT_TOL,
            format!("worst relative drift {worst_p:.3e} (cap {DRIFT_TOL:.0e})"),
        ));
        manifest.checks.push(Check::new(
            "conservation-energy",
            worst_e <= DRIFT_TOL,
            format!("worst relative drift {worst_e:.3e} (cap {DRIFT_TOL:.0e})"),
        ));

        let floor = cfg.eps * (1.0 - OVERLAP_RTOL);
        let min_pair = rows.iter().map(|r| r.min_pair_distance).fold(f64::INFINITY, f64::min);
        manifest.checks.push(Check::new(
            "exclusion",
            min_pair >= floor,
            format!("smallest checked pair distance {min_pair:.12e} vs floor {floor:.12e}"),
        ));

        let passing = rows.iter().filter(|r| r.ks_p > KS_P_MIN).count();
        let fraction = passing as f64 / rows.len() as f64;
        manifest.checks.push(Check::new(
            "stationarity-ks",
            fraction >= KS_PASS_FRACTION,
            format!(
                "{passing}/{} replicas with KS p > {KS_P_MIN} (need {KS_PASS_FRACTION})",
                rows.len()
            ),
        ));

        let total: u64 = rows.iter().map(|r| r.collisions).sum();
        let observed =
            2.0 * total as f64 / (cfg.n as f64 * t_end * rows.len() as f64);
        if total >= MIN_COLLISIONS_FOR_RATE {
            let rel = (observed / rate - 1.0).abs();
            manifest.checks.push(Check::new(
                "collision-frequency",
                rel <= cfg.analysis.tolerance,
                format!(
                    "observed {observed:.6e} vs kernel prediction {rate:.6e}: relative gap \
                     {rel:.4} (cap {})",
                    cfg.analysis.tolerance
                ),
            ));
        } else {
            manifest.checks.push(Check::new(
                "collision-frequency",
                true,
                format!("skipped: {total} collisions is too few for a frequency estimate"),
            ));
        }

        manifest.checks.push(max_principle_check(&monitor, cfg.lambda, cfg.beta));

        let summary = vec![
            ("ks_pass_fraction".to_string(), fraction),
            ("collision_frequency_ratio".to_string(), observed / rate),
            ("max_momentum_drift".to_string(), worst_p),
            ("max_energy_drift".to_string(), worst_e),
            ("min_pair_distance".to_string(), min_pair),
        ];
        summary_to_notes(&summary, &mut manifest);
    }

    manifest.notes.push(format!(
        "predicted mean free time {mft:.6e}; horizon {t_end:.6e} = {} mean free times",
        cfg.analysis.t_end_mft
    ));
    manifest.notes.push(
        "tagged phase-space samples are taken every sample_dt_mft mean free times".to_string(),
    );

    let header = "replica,seed,collisions,events,momentum_drift,energy_drift,min_pair_distance,\
                  ks_p,collision_frequency";
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.replica,
                r.seed,
                r.collisions,
                r.events,
                csv_f64(r.momentum_drift),
                csv_f64(r.energy_drift),
                csv_f64(r.min_pair_distance),
                csv_f64(r.ks_p),
                csv_f64(r.collision_frequency)
            )
        })
        .collect();
    ctx.write_csv("equilibrium.csv", header, &csv_rows)?;
    ctx.write_json("equilibrium.json", &rows)?;

    let timings = super::make_timings(start, per_replica);
    ctx.finish(manifest, timings).map_err(RunError::config)
}
