use fedselect_core::server::ClientExecutor;
use rayon::prelude::*;

use crate::error::{Result, RunError};

/// Environment variable capping the number of client worker threads.
pub const THREADS_ENV: &str = "FEDSELECT_THREADS";

/// Runs client work on a dedicated rayon pool. Results keep the order of the
/// requested ids, so rounds stay bit-reproducible at any thread count.
pub struct ParallelExecutor {
    pool: rayon::ThreadPool,
}

impl ParallelExecutor {
    /// `threads = None` lets rayon pick one worker per core.
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| RunError::config(THREADS_ENV, e.to_string()))?;
        Ok(Self { pool })
    }

    /// Reads the thread cap from [`THREADS_ENV`].
    pub fn from_env() -> Result<Self> {
        Self::new(threads_from(std::env::var(THREADS_ENV).ok().as_deref())?)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

fn threads_from(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(RunError::config(
                THREADS_ENV,
                format!("expected a positive integer, got {s:?}"),
            )),
        },
    }
}

impl ClientExecutor for ParallelExecutor {
    fn run<T, F>(&self, ids: &[usize], f: F) -> fedselect_core::Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> fedselect_core::Result<T> + Sync + Send,
    {
        self.pool.install(|| ids.par_iter().map(|&id| f(id)).collect())
    }
}
