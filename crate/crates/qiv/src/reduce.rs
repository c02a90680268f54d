//! Deterministic data-parallel reductions.
//!
//! Row sums (log-likelihood, scores, influence functions) and replicate
//! maps run through the helpers here. Summation always uses pairwise
//! recursion with midpoint splits, so the floating-point result is
//! bit-identical whether or not the `parallel` feature is enabled and
//! regardless of thread count; enabling `parallel` only changes which
//! thread evaluates each subtree. Pairwise summation also carries an
//! O(log n) rounding-error bound versus O(n) for a running sum.

/// Subtrees at or below this many rows are summed sequentially. Kept
/// small so the tree shape is the same fine-grained bracketing for any
/// input length; concatenating a block with itself then splits exactly at
/// the copy boundary and linear identities hold bit-exactly.
const LEAF: usize = 32;

/// Minimum range size before a subtree is offered to rayon.
#[cfg(feature = "parallel")]
const PAR_MIN: usize = 4096;

/// Pairwise sum of `f(i)` for `i` in `lo..hi`.
pub fn pairwise_sum<F>(lo: usize, hi: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if hi - lo <= LEAF {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    #[cfg(feature = "parallel")]
    {
        if hi - lo >= PAR_MIN {
            let (a, b) = rayon::join(|| pairwise_sum(lo, mid, f), || pairwise_sum(mid, hi, f));
            return a + b;
        }
    }
    pairwise_sum(lo, mid, f) + pairwise_sum(mid, hi, f)
}

/// Pairwise vector sum: `f(i, acc)` adds row `i`'s contribution into `acc`.
pub fn pairwise_sum_vec<F>(lo: usize, hi: usize, dim: usize, f: &F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if hi - lo <= LEAF {
        let mut acc = vec![0.0; dim];
        for i in lo..hi {
            f(i, &mut acc);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    let combine = |mut a: Vec<f64>, b: Vec<f64>| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        a
    };
    #[cfg(feature = "parallel")]
    {
        if hi - lo >= PAR_MIN {
            let (a, b) = rayon::join(
                || pairwise_sum_vec(lo, mid, dim, f),
                || pairwise_sum_vec(mid, hi, dim, f),
            );
            return combine(a, b);
        }
    }
    combine(
        pairwise_sum_vec(lo, mid, dim, f),
        pairwise_sum_vec(mid, hi, dim, f),
    )
}

/// Map `f` over `0..n`, preserving index order in the output.
///
/// Each element must be independently computable (replicates own their
/// seeded RNG streams), which makes the parallel and sequential paths
/// produce identical vectors.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`pairwise_sum`]; same tree shape, never spawns.
/// Exists so benchmarks can compare the two execution modes directly.
pub fn pairwise_sum_seq<F>(lo: usize, hi: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64,
{
    if hi - lo <= LEAF {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    pairwise_sum_seq(lo, mid, f) + pairwise_sum_seq(mid, hi, f)
}
