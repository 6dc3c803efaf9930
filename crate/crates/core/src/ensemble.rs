//! Deterministic ensemble execution: per-replica seeds derived from a base
//! seed, replicas run independently (optionally in parallel), and results
//! collected in replica order so concurrent and sequential runs agree.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::replica_seed;

/// Per-replica seeds, derived deterministically from the base seed and
/// guaranteed pairwise distinct.
pub fn replica_seeds(base: u64, count: usize) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = (0..count).map(|i| replica_seed(base, i as u64)).collect();
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::InvalidParam(format!(
            "replica seed collision for base {base}, count {count}"
        )));
    }
    Ok(seeds)
}

/// Run one closure per replica, in parallel on the current thread pool, and
/// return results in replica order. Each replica receives its index and its
/// derived seed; replicas must not communicate, which makes the result
/// independent of scheduling.
pub fn map_replicas<T: Send>(
    seeds: &[u64],
    f: impl Fn(usize, u64) -> T + Sync,
) -> Vec<T> {
    seeds.par_iter().enumerate().map(|(i, &s)| f(i, s)).collect()
}
