//! Data-parallel helpers. With the `parallel` feature (default) work is spread
//! over the rayon pool; without it every call runs sequentially. Results are
//! always returned in index order, so outputs do not depend on the mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the crate is built with the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this mode actually runs on multiple threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Execution mode for a worker count: `1` is sequential, `0` keeps rayon's
/// default pool, anything else sizes the global pool once.
pub fn execution_for_jobs(jobs: usize) -> crate::Result<Execution> {
    if jobs == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| crate::Error::invalid(format!("cannot size thread pool: {e}")))?;
    }
    Ok(Execution::Parallel)
}

/// `(0..n).map(f)` in the requested mode, preserving order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_range`] over a slice.
pub fn map_slice<S, T, F>(exec: Execution, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_range(exec, items.len(), |i| f(&items[i]))
}
