//! Order-preserving batch map, parallel when the `parallel` feature is on.
//!
//! Results always come back in input order regardless of worker count, so
//! batch outputs are byte-identical across configurations. `workers == 0`
//! uses one worker per core, `workers == 1` stays on the calling thread.

#[cfg(feature = "parallel")]
pub fn ordered_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    if workers == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    if workers == 0 {
        return items.par_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool");
    pool.install(|| items.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, R, F>(items: &[T], _workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
