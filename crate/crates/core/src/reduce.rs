//! Deterministic parallel reduction over index ranges.
//!
//! Reductions over paths use a fixed pairwise tree whose shape depends only
//! on the range and leaf size, never on the scheduler. Leaves accumulate
//! sequentially in index order; internal nodes merge left-then-right. Results
//! are therefore bit-identical across thread counts.

/// Leaf size shared by every per-path reduction. Objective averages and the
/// training loss must sum in the same order so a forward-only evaluation
/// reproduces the training loss bit for bit.
pub(crate) const PATH_LEAF: usize = 64;

/// Map `leaf` over sub-ranges of `[lo, hi)` of at most `leaf_size` elements
/// and combine with `merge` along a fixed binary tree.
pub fn pairwise_reduce<T, Leaf, Merge>(
    lo: usize,
    hi: usize,
    leaf_size: usize,
    leaf: &Leaf,
    merge: &Merge,
) -> T
where
    T: Send,
    Leaf: Fn(usize, usize) -> T + Sync,
    Merge: Fn(T, T) -> T + Sync,
{
    debug_assert!(lo <= hi && leaf_size >= 1);
    if hi - lo <= leaf_size {
        return leaf(lo, hi);
    }
    let mid = lo + (hi - lo) / 2;
    let (left, right) = rayon::join(
        || pairwise_reduce(lo, mid, leaf_size, leaf, merge),
        || pairwise_reduce(mid, hi, leaf_size, leaf, merge),
    );
    merge(left, right)
}

/// Mean over `[0, n)` of `f(i)` with the fixed-tree summation order.
#[cfg(test)]
pub fn pairwise_mean<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    assert!(n > 0, "mean over an empty range");
    let sum = pairwise_reduce(
        0,
        n,
        1024,
        &|lo, hi| (lo..hi).map(&f).sum::<f64>(),
        &|a, b| a + b,
    );
    sum / n as f64
}
