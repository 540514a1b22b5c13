//! Execution strategy for the data-parallel loops (Monte Carlo trials,
//! seeds, ablation cells, per-group mask selection).
//!
//! With the `parallel` feature disabled every strategy runs sequentially.
//! Results are always returned in index order, so aggregates do not depend
//! on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How an indexed batch of independent jobs is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Use the rayon pool. `threads = None` uses the ambient pool.
    #[default]
    Parallel,
    ParallelWith {
        threads: usize,
    },
}

impl Exec {
    /// Maps from a `--jobs N` style flag: 1 is sequential, 0 means "all cores".
    pub fn from_jobs(jobs: usize) -> Self {
        match jobs {
            1 => Exec::Sequential,
            0 => Exec::Parallel,
            n => Exec::ParallelWith { threads: n },
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self != Exec::Sequential
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::ParallelWith { threads } => match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(_) => (0..n).into_par_iter().map(&f).collect(),
            },
            #[cfg(not(feature = "parallel"))]
            _ => (0..n).map(f).collect(),
        }
    }

    /// Applies `f` to every `chunk`-sized mutable slice of `data` together
    /// with the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel | Exec::ParallelWith { .. } => {
                data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c))
            }
            _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}
