//! Data-parallel primitives used by the solver phases.
//!
//! With the `parallel` feature (default) these run on the current rayon
//! pool; otherwise they fall back to plain iterators. Every helper maps
//! independent items and collects in index order, so results never depend
//! on the number of worker threads.

pub use self::actual::{for_each_row_mut, map_range};

#[cfg(feature = "parallel")]
mod actual {
    use rayon::prelude::*;

    /// Maps `0..n` through `f`, collecting results in index order.
    pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    /// Calls `f(row_index, row)` for every `width`-long row of `data`.
    pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

#[cfg(not(feature = "parallel"))]
mod actual {
    pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_row_mut<F>(data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        data.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Runs `f` with at most `workers` threads when the `parallel` feature is
/// enabled. `None` keeps the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = workers {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
            {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}
