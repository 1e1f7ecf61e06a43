//! Shared inputs for the benchmarks.

use arctopk::matrix::DenseMatrix;
use arctopk::rng::{gaussian_matrix, SeedValue};

/// `(m, n)` shapes swept by the compression benchmarks.
pub const SHAPES: [(usize, usize); 3] = [(16, 64), (64, 256), (256, 1024)];

/// Gaussian `m x n` matrix with row `p` scaled by `1 / (p + 1)`.
pub fn skewed(seed: u64, m: usize, n: usize) -> DenseMatrix {
    let mut g = gaussian_matrix(SeedValue(seed), m, n);
    for p in 0..m {
        let s = 1.0 / (p as f64 + 1.0);
        g.row_mut(p).iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// One skewed matrix per rank.
pub fn locals(world: usize, m: usize, n: usize) -> Vec<DenseMatrix> {
    (0..world).map(|i| skewed(i as u64, m, n)).collect()
}
