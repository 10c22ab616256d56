//! Execution-policy helpers: data-parallel loops with a sequential fallback.
//!
//! With the `parallel` feature (default) the loops fan out over rayon; built
//! without it, or with the thread budget set to 1, they run as plain
//! sequential loops. Every parallel loop here writes disjoint output slots
//! and reads shared inputs, so both paths produce bit-identical results;
//! the thread budget only changes wall-clock time.

use std::sync::atomic::{AtomicUsize, Ordering};

/// 0 means "library default" (rayon's own pool size when the feature is on,
/// sequential otherwise).
static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);

pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
fn parallel_active() -> bool {
    max_threads() != 1
}

/// Apply `f` to every `width`-sized row of `data`, indexed from `base`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, base: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(base + i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(base + i, row);
    }
}

/// Collect `f(0..n)` preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_active() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
