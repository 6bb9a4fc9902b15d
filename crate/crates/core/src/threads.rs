//! Worker-thread budget shared by the batch-parallel paths.
//!
//! `STREAMFORGE_THREADS` caps the rayon pool used for trajectory harvesting
//! and batch evaluation. Training steps and runtime measurement stay on one
//! thread regardless.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Thread cap from `STREAMFORGE_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn worker_threads() -> usize {
    match std::env::var("STREAMFORGE_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Shared pool for embarrassingly parallel batch work. Each work item must
/// be independently seeded so results are order-deterministic.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .expect("failed to build worker pool")
    })
}
