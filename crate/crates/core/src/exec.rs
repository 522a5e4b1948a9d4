//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature the kernels split work over rayon's pool;
//! without it (or after `set_parallel(false)`) they run the same closures
//! in a plain loop. Each work item writes a disjoint output slice and
//! reduces in a fixed order, so both paths produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch, mainly for benchmarks comparing the two paths.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Ordered map over `0..n`.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
