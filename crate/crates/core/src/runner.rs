//! Trial-level parallelism with deterministic output order.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f(0..trials)` on `workers` threads and returns results in trial order.
pub fn map_trials<T, F>(trials: u64, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if workers <= 1 {
        return (0..trials).map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..trials).into_par_iter().map(&f).collect())
}
