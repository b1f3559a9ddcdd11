//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature the maps below fan out on rayon;
//! without it they run as plain loops. Results are collected in input order
//! and reductions use a fixed chunking, so both paths are bit-identical.

use std::ops::Range;

/// Chunk width used when accumulating minibatch gradients. Fixing it (rather
/// than deriving it from the thread count) keeps floating-point reduction
/// order independent of the machine.
pub const GRAD_CHUNK: usize = 16;

#[cfg(feature = "parallel")]
pub fn map_indexed<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Sequential twin of [`map_indexed`], used by the benchmark suite to compare
/// the two execution modes within one binary.
pub fn map_indexed_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Splits `0..n` into ranges of width `chunk` (last one possibly shorter).
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Evaluates `eval` over fixed-width chunks of `0..n` (in parallel when
/// enabled) and folds the results in chunk order.
pub fn chunked_fold<R, F, G>(n: usize, chunk: usize, eval: F, mut fold: G, init: R) -> R
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
    G: FnMut(R, R) -> R,
{
    let ranges = chunk_ranges(n, chunk);
    let parts = map_indexed(&ranges, |_, r| eval(r.clone()));
    parts.into_iter().fold(init, |acc, p| fold(acc, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range() {
        assert_eq!(chunk_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(chunk_ranges(0, 4), Vec::<Range<usize>>::new());
        assert_eq!(chunk_ranges(4, 4), vec![0..4]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let data: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let a = map_indexed(&data, |i, x| x * i as f64);
        let b = map_indexed_seq(&data, |i, x| x * i as f64);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_fold_is_order_stable() {
        let got = chunked_fold(
            100,
            GRAD_CHUNK,
            |r| r.map(|i| 1.0 / (i as f64 + 1.0)).sum::<f64>(),
            |a, b| a + b,
            0.0,
        );
        let want = chunk_ranges(100, GRAD_CHUNK)
            .into_iter()
            .map(|r| r.map(|i| 1.0 / (i as f64 + 1.0)).sum::<f64>())
            .fold(0.0, |a, b| a + b);
        assert_eq!(got, want);
    }
}
