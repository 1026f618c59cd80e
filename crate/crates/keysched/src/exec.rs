use keysched_core::trainer::Executor;
use rayon::prelude::*;

use crate::error::{CliError, Result};

/// Executor backed by a dedicated rayon pool. Results come back in index
/// order, so output never depends on the number of threads.
#[derive(Debug)]
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    pub fn new(jobs: usize) -> Result<Self> {
        if jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))?;
        Ok(Self { pool })
    }

    pub fn jobs(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Parallel {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use keysched_core::trainer::Sequential;

    #[test]
    fn order_is_independent_of_jobs() {
        let f = |i: usize| i * i + 1;
        let want = Sequential.map(100, f);
        for jobs in [1, 2, 4] {
            assert_eq!(Parallel::new(jobs).unwrap().map(100, f), want);
        }
        assert!(Parallel::new(0).is_err());
    }
}
