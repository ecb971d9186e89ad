//! Optional intra-op parallelism.
//!
//! Work is only ever split across batch samples, and every cross-sample
//! reduction is summed in sample order on the calling thread, so results are
//! bitwise identical for any thread count.

use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::error::{config_err, Result};

static POOL: RwLock<Option<Arc<rayon::ThreadPool>>> = RwLock::new(None);

/// Sets the number of worker threads used by tensor kernels. `1` (the
/// default) runs everything on the calling thread.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(config_err!("threads must be >= 1"));
    }
    let pool = if n == 1 {
        None
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_err!("cannot build thread pool: {e}"))?;
        Some(Arc::new(pool))
    };
    *POOL.write().expect("thread pool lock poisoned") = pool;
    Ok(())
}

pub fn threads() -> usize {
    POOL.read()
        .expect("thread pool lock poisoned")
        .as_ref()
        .map_or(1, |p| p.current_num_threads())
}

fn pool() -> Option<Arc<rayon::ThreadPool>> {
    POOL.read().expect("thread pool lock poisoned").clone()
}

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match pool() {
        Some(pool) => pool.install(|| {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }),
        None => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub(crate) fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        None => (0..n).map(f).collect(),
    }
}

/// Asks glibc malloc to keep freed blocks instead of returning them to the
/// kernel. Each training step allocates and drops hundreds of megabytes of
/// activations; without this every step pays for fresh page faults.
pub(crate) fn retain_freed_memory() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tuning parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
