//! Thread budget for the layer kernels.
//!
//! Matrix products are split across output columns and reductions over the
//! batch are summed in sample order, so results do not depend on the thread
//! count. With a budget of one thread every kernel runs inline on
//! the caller's thread ("deterministic mode").

use std::sync::OnceLock;

use rayon::ThreadPool;

/// Environment variable capping kernel parallelism. `0` or `1` selects
/// deterministic single-threaded execution.
pub const THREADS_ENV: &str = "TERNAUS_THREADS";

static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();

fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn build(threads: usize) -> Option<ThreadPool> {
    if threads <= 1 {
        return None;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .thread_name(|i| format!("ternaus-{i}"))
        .start_handler(|_| std::mem::forget(FlushDenormals::enable()))
        .build()
        .ok()
}

/// Fixes the thread budget before first use. Returns `false` if the pool was
/// already initialised (the earlier setting stays in force).
pub fn init(threads: usize) -> bool {
    POOL.set(build(threads)).is_ok()
}

fn pool() -> Option<&'static ThreadPool> {
    POOL.get_or_init(|| build(threads_from_env())).as_ref()
}

pub fn threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

pub fn is_deterministic() -> bool {
    threads() <= 1
}

/// Maps `0..count` to a vector in index order.
pub fn map_indexed<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    match pool() {
        Some(p) if count > 1 => {
            use rayon::prelude::*;
            p.install(|| (0..count).into_par_iter().map(f).collect())
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Flushes subnormal floats to zero on the current thread while alive.
///
/// Tiny activations and gradients late in training otherwise fall into the
/// subnormal range, where x86 arithmetic is many times slower. The previous
/// mode is restored on drop.
pub struct FlushDenormals {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    prev: u32,
}

impl FlushDenormals {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    pub fn enable() -> Self {
        // Flush-to-zero (bit 15) and denormals-are-zero (bit 6).
        const FTZ_DAZ: u32 = 0x8040;
        #[allow(deprecated)]
        // SAFETY: only the denormal-handling bits of MXCSR change.
        let prev = unsafe {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            let prev = _mm_getcsr();
            _mm_setcsr(prev | FTZ_DAZ);
            prev
        };
        FlushDenormals { prev }
    }

    #[cfg(not(all(target_arch = "x86_64", target_feature = "sse")))]
    pub fn enable() -> Self {
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
        #[allow(deprecated)]
        // SAFETY: restores the mode saved by `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.prev)
        };
    }
}
