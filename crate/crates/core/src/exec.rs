//! Execution policy for the data-parallel loops.
//!
//! Every parallel loop produces its per-index results in index order and all
//! reductions over them are performed sequentially afterwards, so the
//! sequential and parallel paths are bit-identical.

/// Selects how row/point loops are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing; falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn label(self) -> &'static str {
        match self {
            Exec::Sequential => "sequential",
            Exec::Parallel if cfg!(feature = "parallel") => "parallel",
            Exec::Parallel => "sequential",
        }
    }

    /// `(0..n).map(f).collect()` with the configured scheduling.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}
