//! Index-parallel execution helpers.
//!
//! The heavy inner loops (group rollouts, per-state reward scoring,
//! Monte-Carlo sampling, finite-difference sweeps) are all maps over an index
//! range with independent work items. With the `parallel` feature they run on
//! rayon; without it they fall back to a plain sequential loop. Outputs are
//! collected in index order either way, so results are bit-identical across
//! thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    map_indexed_seq(n, f)
}

/// The sequential fallback, always available (benchmarks compare it against
/// the parallel path on identical workloads).
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt() + i as f64;
        assert_eq!(map_indexed(257, f), map_indexed_seq(257, f));
    }
}
