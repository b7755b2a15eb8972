//! Execution helpers for data-parallel inner loops.
//!
//! With the `parallel` feature (default) these fan out over rayon; without it
//! they compile to plain sequential loops. A runtime switch allows forcing
//! sequential execution even when the feature is on, which the benches use to
//! compare both paths in a single build.
//!
//! Determinism contract: callers only get disjoint `&mut` chunks or an
//! index-ordered `Vec` back, so results never depend on thread count or
//! scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. No-op without the feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Configure the worker pool size. Called once from the CLI; later calls are
/// ignored by rayon, which is fine since the pool is only a throughput knob.
pub fn configure_workers(workers: usize) {
    set_parallel(workers > 1);
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive `size`-element chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(size > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(size).enumerate() {
        f(i, c);
    }
}

/// Map over items, preserving order in the output.
pub fn map_indexed<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, &x)).collect();
    }
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Run `f(i)` for `i in 0..n`, collecting results in index order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}
