//! Backward influence trees in the dilute gas: reconstruct the set of
//! particles that causally influenced chosen roots over a fixed window,
//! check the slice-by-slice growth cap on adjunctions, and count the pairs
//! that met more than once (the events a tree expansion cannot absorb).

use hsgas::md::{LogMode, SimState};
use hsgas::trees::{admissible, branching_profile, build_backward_tree, detect_recollisions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    gas_collision_rate, gas_params, initial_state, record_failures, summary_to_notes,
    timed_replicas, ReplicaFailure, RunError, RunResult, Summary,
};
use crate::config::Resolved;
use crate::manifest::{csv_f64, Check, OutputCtx, RunManifest};

/// At least this fraction of trees must satisfy the growth cap.
pub const ADMISSIBLE_MIN: f64 = 0.99;

#[derive(Serialize)]
struct TreeRow {
    replica: usize,
    root: u32,
    t: f64,
    nodes: usize,
    depth: usize,
    /// Pairs of members that collided while both were already members.
    recollision_pairs: usize,
    admissible: bool,
    /// Adjunction counts per backward slice of duration tau.
    profile: Vec<u64>,
}

struct ReplicaOut {
    rows: Vec<TreeRow>,
    collisions: u64,
}

pub fn run<const D: usize>(cfg: &Resolved, mut ctx: OutputCtx) -> RunResult {
    let start = std::time::Instant::now();
    let rate = gas_collision_rate::<D>(cfg)?;
    let mft = 1.0 / rate;
    let window = cfg.analysis.tree_window_mft * mft;
    let tau = cfg.analysis.tau_mft * mft;
    let a = cfg.analysis.growth_base;
    let t_end = cfg.analysis.trees_per_replica as f64 * window;
    let roots = cfg.analysis.tree_roots.min(cfg.n) as u32;
    if roots == 0 || cfg.analysis.trees_per_replica == 0 {
        return Err(RunError::config("need at least one root and one window".to_string()));
    }
    gas_params::<D>(cfg, cfg.base_seed)?;
    let seeds = hsgas::ensemble::replica_seeds(cfg.base_seed, cfg.replicas)
        .map_err(|e| RunError::config(format!("seed derivation: {e}")))?;

    let (outcomes, per_replica_secs) =
        timed_replicas(&seeds, |r, seed| -> Result<ReplicaOut, ReplicaFailure<D>> {
            let fail = |message: String, dump| ReplicaFailure { replica: r, seed, message, dump };
            let params = gas_params::<D>(cfg, seed).map_err(|e| fail(e.message.clone(), None))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf = initial_state(&params, cfg, &mut rng)
                .map_err(|e| fail(format!("equilibrium draw: {e}"), None))?;
            let mut sim = SimState::with_options(&conf, &params, None, LogMode::Full)
                .map_err(|e| fail(format!("initialization: {e}"), Some((conf.clone(), params))))?;
            let mut rows = Vec::new();
            for j in 1..=cfg.analysis.trees_per_replica {
                let t = (j as f64 * window).min(t_end);
                if let Err(e) = sim.run_until(t) {
                    let dump = (sim.current_configuration(), params);
                    return Err(fail(format!("dynamics at t = {t:.6e}: {e}"), Some(dump)));
                }
                for root in 0..roots {
                    let tree = build_backward_tree(sim.log(), root, t, window)
                        .map_err(|e| fail(format!("tree at t = {t:.6e}, root {root}: {e}"), None))?;
                    let profile = branching_profile(&tree, tau);
                    rows.push(TreeRow {
                        replica: r,
                        root,
                        t,
                        nodes: tree.node_count(),
                        depth: tree.depth(),
                        recollision_pairs: detect_recollisions(&tree).len(),
                        admissible: admissible(&profile, a),
                        profile: profile.counts,
                    });
                }
            }
            Ok(ReplicaOut { rows, collisions: sim.collision_count() })
        });

    let mut manifest = RunManifest::new(cfg);
    manifest.seeds = seeds;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(out) => {
                manifest.event_counts.push(out.collisions);
                rows.extend(out.rows);
            }
            Err(f) => {
                manifest.event_counts.push(0);
                failures.push(f);
            }
        }
    }
    record_failures(&failures, &mut ctx, &mut manifest)?;
    if rows.is_empty() {
        return Err(RunError::config("no trees were built".to_string()));
    }

    let total = rows.len() as f64;
    let admissible_count = rows.iter().filter(|r| r.admissible).count();
    let admissible_fraction = admissible_count as f64 / total;
    manifest.checks.push(Check::new(
        "admissible-fraction",
        admissible_fraction >= ADMISSIBLE_MIN,
        format!(
            "{admissible_count}/{} trees satisfy the growth cap {a}^k per slice (need {})",
            rows.len(),
            ADMISSIBLE_MIN
        ),
    ));

    let recollision_trees = rows.iter().filter(|r| r.recollision_pairs > 0).count();
    let recollision_fraction = recollision_trees as f64 / total;
    manifest.checks.push(Check::new(
        "recollision-fraction",
        true,
        format!(
            "informational: {recollision_trees}/{} trees contain a repeated pair \
             ({recollision_fraction:.4})",
            rows.len()
        ),
    ));

    let mean_nodes = rows.iter().map(|r| r.nodes as f64).sum::<f64>() / total;
    let max_depth = rows.iter().map(|r| r.depth).max().unwrap_or(0);

    let summary: Summary = vec![
        ("tree_count".to_string(), total),
        ("admissible_fraction".to_string(), admissible_fraction),
        ("recollision_fraction".to_string(), recollision_fraction),
        ("recollision_trees".to_string(), recollision_trees as f64),
        ("mean_nodes".to_string(), mean_nodes),
    ];
    summary_to_notes(&summary, &mut manifest);

    manifest.notes.push(format!(
        "window {window:.6e} ({} mean free times), slices of {tau:.6e} ({} mean free times), \
         growth base {a}; {} roots x {} windows per replica",
        cfg.analysis.tree_window_mft,
        cfg.analysis.tau_mft,
        roots,
        cfg.analysis.trees_per_replica
    ));
    manifest.notes.push(format!("deepest tree: {max_depth} generations"));

    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            let profile =
                r.profile.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            format!(
                "{},{},{},{},{},{},{},{}",
                r.replica,
                r.root,
                csv_f64(r.t),
                r.nodes,
                r.depth,
                r.recollision_pairs,
                r.admissible,
                profile
            )
        })
        .collect();
    ctx.write_csv(
        "trees.csv",
        "replica,root,t,nodes,depth,recollision_pairs,admissible,profile",
        &csv_rows,
    )?;
    ctx.write_json("trees.json", &rows)?;

    let timings = super::make_timings(start, per_replica_secs);
    ctx.finish(manifest, timings).map_err(RunError::config)
}
