//! Sequential / data-parallel execution switch.
//!
//! Every batch loop in the pipeline goes through [`Execution`]. With the
//! `parallel` feature (on by default) `Execution::Parallel` fans out over
//! rayon; without it both variants run the same sequential loop. Results are
//! always returned in input order, so outputs never depend on the variant.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Whether this variant actually runs on more than one thread in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Order-preserving map.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Order-preserving fallible map; returns the first error in input order.
    pub fn try_map<T, U, E, F>(self, items: &[T], f: F) -> Result<Vec<U>, E>
    where
        T: Sync,
        U: Send,
        E: Send,
        F: Fn(&T) -> Result<U, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    /// Like [`Execution::try_map`] but never runs more than `limit` calls at once.
    /// Used for provider-bound work where the limit protects a rate budget.
    pub fn try_map_bounded<T, U, E, F>(self, limit: usize, items: &[T], f: F) -> Result<Vec<U>, E>
    where
        T: Sync,
        U: Send,
        E: Send,
        F: Fn(&T) -> Result<U, E> + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && limit > 1 && items.len() > 1 {
            use rayon::prelude::*;
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
                return pool.install(|| items.par_iter().map(&f).collect::<Vec<_>>())
                    .into_iter()
                    .collect();
            }
        }
        let _ = limit;
        items.iter().map(f).collect()
    }
}
