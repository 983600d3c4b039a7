//! Thread-pool sizing.

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FLASHSVD_THREADS";

/// Parsed value of [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n: &usize| n > 0)
}

/// Sizes the global rayon pool from [`THREADS_ENV`]. Returns the thread
/// count in effect; later calls are no-ops once the pool exists.
pub fn init_thread_pool() -> usize {
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}
