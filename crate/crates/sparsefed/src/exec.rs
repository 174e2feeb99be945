//! Thread-pool execution of device updates.

use rayon::prelude::*;
use sparsefed_core::simulator::Executor;

use crate::error::CliError;

/// Runs device updates on the current rayon pool. Results come back in
/// input order, so runs are identical for every thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonExec;

impl Executor for RayonExec {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let f = &f;
        items.par_iter().map(f).collect()
    }
}

/// Runs `job` on a dedicated pool of `threads` workers, or on the global
/// pool when `threads` is `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, job: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match threads {
        None => Ok(job()),
        Some(0) => Err(CliError::Config("thread count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Internal(e.to_string()))?;
            Ok(pool.install(job))
        }
    }
}
