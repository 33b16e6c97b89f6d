//! Execution strategy for the data-parallel loops (per-neuron attribution,
//! threshold sweeps, cosine neighbourhoods).
//!
//! With the `parallel` feature disabled every strategy runs sequentially, so
//! callers never need to branch on the feature themselves.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// `jobs == 1` selects the sequential path.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel
        }
    }

    /// Whether work actually fans out across threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if par.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(par: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if par.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Like [`map`], but stops at the first error (in input order).
pub fn try_map<T, R, E, F>(par: Parallelism, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(par, items, f).into_iter().collect()
}
