//! Data-parallel map over independent work items.
//!
//! Rollout collection, evaluation, and Monte-Carlo suites are
//! embarrassingly parallel across episodes; every item derives its own RNG
//! stream from its index, so results are identical whichever path runs.

/// Sequential map, always available. Reference path for benches and the
/// fallback when the `parallel` feature is disabled.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

/// Map `f` over `0..n`, in parallel when the `parallel` feature is active.
/// Output order matches index order either way.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    map_indexed_seq(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| {
            let mut rng = crate::seeding::stream(9, &[i as u64]);
            rand::Rng::random::<u64>(&mut rng)
        };
        assert_eq!(map_indexed(64, f), map_indexed_seq(64, f));
    }
}
