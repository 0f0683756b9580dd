//! Kernel thread-pool sizing.

/// Environment variable capping kernel parallelism; `1` is the
/// bitwise-reproducible reference mode.
pub const THREADS_ENV: &str = "MGD_THREADS";

/// Thread count requested through [`THREADS_ENV`], if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Configures the global rayon pool from [`THREADS_ENV`]. Returns the
/// thread count in effect. Calling it more than once is harmless; the
/// first configuration wins.
pub fn init_from_env() -> usize {
    if let Some(n) = threads_from_env() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}
