//! Small numeric helpers with deterministic parallel reductions.
//!
//! Rayon reductions do not guarantee a combination order, so every float
//! reduction in this crate goes through fixed-size chunking with an ordered
//! serial combine. Results are then bit-identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Real;

/// Chunk size for deterministic parallel reductions.
pub(crate) const CHUNK: usize = 8192;

/// Sum with a fixed chunking scheme; identical result serial or parallel.
pub fn det_sum<T: Real>(xs: &[T]) -> T {
    let partials: Vec<T> = xs
        .par_chunks(CHUNK)
        .map(|c| {
            let mut acc = T::zero();
            for &x in c {
                acc += x;
            }
            acc
        })
        .collect();
    let mut total = T::zero();
    for p in partials {
        total += p;
    }
    total
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se<T: Real>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    assert!(n > 0, "mean of empty sample");
    let nf = T::of_usize(n);
    let mean = det_sum(xs) / nf;
    if n == 1 {
        return (mean, T::zero());
    }
    let sq: Vec<T> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = det_sum(&sq) / (nf - T::one());
    (mean, (var / nf).sqrt())
}

/// Sample variance (unbiased).
pub fn sample_variance<T: Real>(xs: &[T]) -> T {
    let n = xs.len();
    assert!(n > 1, "variance needs at least two samples");
    let nf = T::of_usize(n);
    let mean = det_sum(xs) / nf;
    let sq: Vec<T> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    det_sum(&sq) / (nf - T::one())
}

/// Standard error of a mean estimated from `blocks` contiguous path blocks.
///
/// Used for the headline Monte Carlo error bars: the per-path contributions
/// are split into equal blocks, and the spread of the block means estimates
/// the error of the grand mean.
pub fn block_se<T: Real>(xs: &[T], blocks: usize) -> T {
    assert!(blocks >= 2, "need at least two blocks");
    let n = xs.len();
    if n < 2 * blocks {
        // Too few paths for a meaningful block estimate; fall back to the
        // plain standard error.
        return mean_and_se(xs).1;
    }
    let per = n / blocks;
    let mut means = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let lo = b * per;
        let hi = if b + 1 == blocks { n } else { lo + per };
        let seg = &xs[lo..hi];
        means.push(det_sum(seg) / T::of_usize(seg.len()));
    }
    let (_, se_of_block_means) = mean_and_se(&means);
    se_of_block_means
}
