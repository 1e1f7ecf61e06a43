//! Row-sparsifying compressors.
//!
//! The pure operators here act on one node's `m x n` matrix. The collective
//! rounds in [`round`] compose them with a [`Comm`](crate::collective::Comm):
//! ARC-Top-K aligns the selected rows across nodes through a shared Gaussian
//! sketch of the averaged matrix, so the sparse rows can be summed with a
//! plain all-reduce.

pub mod round;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{frobenius_norm_sq, row_norms_sq, DenseMatrix};
use crate::rng::{SeedValue, SeededStream};

pub use round::{arc_topk_round, compress_round, simulate_round, ArcRound, GroupRound, RoundOutput};

/// Compression schemes understood by [`compress_round`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// No compression; the whole matrix is all-reduced.
    Dense,
    /// Per-node row Top-K merged with an all-gather.
    TopK,
    /// Shared-seed random rows, all-reduced.
    RandK,
    /// All-reduce compatible Top-K on sketched row importance.
    Arc,
    /// Per-node coordinate Top-K merged with an all-gather.
    CoordTopK,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::TopK => "topk",
            Method::RandK => "randk",
            Method::Arc => "arc",
            Method::CoordTopK => "coord-topk",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Method::Dense),
            "topk" => Ok(Method::TopK),
            "randk" => Ok(Method::RandK),
            "arc" => Ok(Method::Arc),
            "coord-topk" => Ok(Method::CoordTopK),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// Shape and sparsity of a row compressor: `k = ceil(mu * m)` of `m` rows are
/// kept, and sketches have width `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorConfig {
    pub m: usize,
    pub mu: f64,
    pub k: usize,
    pub r: usize,
}

impl CompressorConfig {
    pub fn new(m: usize, mu: f64, r: usize) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::InvalidConfig(format!("mu must be in (0, 1], got {mu}")));
        }
        // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
        let k = ((mu * m as f64) - 1e-9).ceil().max(1.0) as usize;
        Self::with_k(m, k, r).map(|c| Self { mu, ..c })
    }

    pub fn with_k(m: usize, k: usize, r: usize) -> Result<Self> {
        if m == 0 || r == 0 || k == 0 || k > m {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= k <= m and r >= 1, got m={m} k={k} r={r}"
            )));
        }
        Ok(Self {
            m,
            mu: k as f64 / m as f64,
            k,
            r,
        })
    }
}

impl CompressorConfig {
    /// Like [`with_k`](Self::with_k), except that coordinate Top-K counts `k`
    /// in coordinates of the `m x n` matrix rather than in rows.
    pub fn for_method(method: Method, m: usize, n: usize, k: usize, r: usize) -> Result<Self> {
        if method != Method::CoordTopK {
            return Self::with_k(m, k, r);
        }
        let len = m * n;
        if len == 0 || r == 0 || k == 0 || k > len {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= k <= {len} coordinates and r >= 1, got k={k} r={r}"
            )));
        }
        Ok(Self {
            m,
            mu: k as f64 / len as f64,
            k,
            r,
        })
    }
}

/// Sorted, duplicate-free set of selected row indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RowSelection(Vec<usize>);

impl RowSelection {
    pub fn new(mut indices: Vec<usize>, m: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidConfig("a selection needs at least one row".into()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate row in selection".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange { index: bad, rows: m });
        }
        Ok(Self(indices))
    }

    pub fn all(m: usize) -> Self {
        Self((0..m).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.0.binary_search(&row).is_ok()
    }
}

/// `(1/sqrt(r)) * G * V` for an `n x r` projection `V`.
pub fn sketch_local(g: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    let product = g.matmul(v)?;
    Ok(product.scaled(1.0 / (v.cols() as f64).sqrt()))
}

/// Row importance `sigma = diag(P P^T)` and the `k` most important rows.
pub fn row_importance(p: &DenseMatrix, k: usize) -> Result<(Vec<f64>, RowSelection)> {
    let sigma = row_norms_sq(p);
    let selection = top_k_indices(&sigma, k)?;
    Ok((sigma, RowSelection(selection)))
}

/// Indices of the `k` largest scores, ties broken toward the smaller index,
/// returned in ascending order.
fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot select {k} of {} entries",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_score = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

fn check_selection(g: &DenseMatrix, sel: &RowSelection) -> Result<()> {
    match sel.indices().last() {
        Some(&last) if last >= g.rows() => Err(Error::IndexOutOfRange {
            index: last,
            rows: g.rows(),
        }),
        _ => Ok(()),
    }
}

/// Copies the selected rows and zeroes the rest.
pub fn mask_rows(g: &DenseMatrix, sel: &RowSelection) -> Result<DenseMatrix> {
    check_selection(g, sel)?;
    let mut out = DenseMatrix::zeros(g.rows(), g.cols());
    for &row in sel.indices() {
        out.row_mut(row).copy_from_slice(g.row(row));
    }
    Ok(out)
}

/// Selected rows packed into a `k x n` matrix (the wire form).
pub fn gather_rows(g: &DenseMatrix, sel: &RowSelection) -> Result<DenseMatrix> {
    check_selection(g, sel)?;
    let mut data = Vec::with_capacity(sel.len() * g.cols());
    for &row in sel.indices() {
        data.extend_from_slice(g.row(row));
    }
    Ok(DenseMatrix::from_raw(sel.len(), g.cols(), data))
}

/// Inverse of [`gather_rows`]: places packed rows back into an `m x n` zero
/// matrix.
pub fn scatter_rows(packed: &[f64], cols: usize, sel: &RowSelection, m: usize) -> Result<DenseMatrix> {
    if packed.len() != sel.len() * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} packed entries for {} rows of width {cols}",
            packed.len(),
            sel.len()
        )));
    }
    let mut out = DenseMatrix::zeros(m, cols);
    check_selection(&out, sel)?;
    for (chunk, &row) in packed.chunks_exact(cols).zip(sel.indices()) {
        out.row_mut(row).copy_from_slice(chunk);
    }
    Ok(out)
}

/// Local row Top-K by exact row norm. Selections are independent per node.
pub fn topk_rows_local(g: &DenseMatrix, k: usize) -> Result<(DenseMatrix, RowSelection)> {
    let sel = RowSelection(top_k_indices(&row_norms_sq(g), k)?);
    Ok((mask_rows(g, &sel)?, sel))
}

/// Coordinate Top-K by magnitude; returns the dense result and the kept
/// coordinates in ascending order.
pub fn coord_topk(g: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let magnitudes: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    let kept = top_k_indices(&magnitudes, k)?;
    let mut out = vec![0.0; g.len()];
    for &i in &kept {
        out[i] = g[i];
    }
    Ok((out, kept))
}

/// Uniformly random `k`-subset of `m` rows, a function of `seed` only, so
/// every node holding the same seed picks the same rows.
pub fn randk_rows_shared(seed: SeedValue, m: usize, k: usize) -> Result<RowSelection> {
    if k == 0 || k > m {
        return Err(Error::InvalidConfig(format!("cannot select {k} of {m} rows")));
    }
    let mut stream = SeededStream::new(seed);
    let mut rows: Vec<usize> = (0..m).collect();
    // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
    for i in 0..k {
        let j = i + stream.next_index(m - i);
        rows.swap(i, j);
    }
    rows.truncate(k);
    RowSelection::new(rows, m)
}

/// `||compressed - original||_F^2`.
pub fn compression_error_sq(original: &DenseMatrix, compressed: &DenseMatrix) -> Result<f64> {
    if original.shape() != compressed.shape() {
        return Err(Error::ShapeMismatch {
            expected: original.shape(),
            actual: compressed.shape(),
        });
    }
    let diff: Vec<f64> = compressed
        .as_slice()
        .iter()
        .zip(original.as_slice())
        .map(|(c, o)| c - o)
        .collect();
    Ok(frobenius_norm_sq(&DenseMatrix::from_raw(
        original.rows(),
        original.cols(),
        diff,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    fn mat<const C: usize>(rows: &[[f64; C]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn config_derives_k_from_mu() {
        assert_eq!(CompressorConfig::new(20, 0.2, 1).unwrap().k, 4);
        assert_eq!(CompressorConfig::new(30, 0.1, 1).unwrap().k, 3);
        assert_eq!(CompressorConfig::new(8, 0.25, 2).unwrap().k, 2);
        assert_eq!(CompressorConfig::new(3, 0.01, 2).unwrap().k, 1);
        assert_eq!(CompressorConfig::new(7, 1.0, 2).unwrap().k, 7);
        assert!(CompressorConfig::new(4, 0.0, 1).is_err());
        assert!(CompressorConfig::new(4, 1.5, 1).is_err());
        assert!(CompressorConfig::new(4, 0.5, 0).is_err());
        assert!(CompressorConfig::with_k(4, 5, 1).is_err());
    }

    #[test]
    fn selection_validation() {
        assert_eq!(RowSelection::new(vec![2, 0], 3).unwrap().indices(), &[0, 2]);
        assert!(RowSelection::new(vec![], 3).is_err());
        assert!(RowSelection::new(vec![1, 1], 3).is_err());
        assert!(matches!(
            RowSelection::new(vec![3], 3),
            Err(Error::IndexOutOfRange { index: 3, rows: 3 })
        ));
    }

    #[test]
    fn sketch_examples() {
        let p = sketch_local(&mat(&[[1.0, 0.0], [0.0, 1.0]]), &mat(&[[2.0], [0.0]])).unwrap();
        assert_eq!(p, mat(&[[2.0], [0.0]]));

        let v = gaussian_matrix(SeedValue(1), 2, 4);
        let p = sketch_local(&DenseMatrix::zeros(3, 2), &v).unwrap();
        assert_eq!(p, DenseMatrix::zeros(3, 4));

        let p = sketch_local(&mat(&[[1.0, 1.0]]), &mat(&[[1.0, 1.0], [1.0, -1.0]])).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((p.get(0, 0) - 2.0 * s).abs() < 1e-15);
        assert_eq!(p.get(0, 1), 0.0);

        assert!(matches!(
            sketch_local(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 1)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn row_importance_examples() {
        let (sigma, sel) = row_importance(&mat(&[[1.0, 2.0], [0.0, 3.0]]), 1).unwrap();
        assert_eq!(sigma, vec![5.0, 9.0]);
        assert_eq!(sel.indices(), &[1]);

        let (_, sel) = row_importance(&mat(&[[1.0], [1.0]]), 1).unwrap();
        assert_eq!(sel.indices(), &[0]);

        let (sigma, sel) = row_importance(&mat(&[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]), 2).unwrap();
        assert_eq!(sigma, vec![25.0, 0.0, 1.0]);
        assert_eq!(sel.indices(), &[0, 2]);

        // All-zero input falls back to the first k rows.
        let (_, sel) = row_importance(&DenseMatrix::zeros(5, 2), 3).unwrap();
        assert_eq!(sel.indices(), &[0, 1, 2]);
    }

    #[test]
    fn mask_examples() {
        let g = mat(&[[1.0, 2.0], [3.0, 4.0]]);
        let sel = RowSelection::new(vec![0], 2).unwrap();
        assert_eq!(mask_rows(&g, &sel).unwrap(), mat(&[[1.0, 2.0], [0.0, 0.0]]));
        assert_eq!(mask_rows(&g, &RowSelection::all(2)).unwrap(), g);
        let too_far = RowSelection::new(vec![5], 6).unwrap();
        assert!(matches!(mask_rows(&g, &too_far), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn gather_scatter_matches_mask() {
        let g = gaussian_matrix(SeedValue(3), 6, 4);
        let sel = RowSelection::new(vec![1, 4, 5], 6).unwrap();
        let packed = gather_rows(&g, &sel).unwrap();
        assert_eq!(packed.shape(), (3, 4));
        let back = scatter_rows(packed.as_slice(), 4, &sel, 6).unwrap();
        assert_eq!(back, mask_rows(&g, &sel).unwrap());
        assert!(scatter_rows(&[1.0], 4, &sel, 6).is_err());
    }

    #[test]
    fn topk_rows_examples() {
        let g = mat(&[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]);
        let (masked, sel) = topk_rows_local(&g, 1).unwrap();
        assert_eq!(sel.indices(), &[0]);
        assert_eq!(masked, mat(&[[3.0, 4.0], [0.0, 0.0], [0.0, 0.0]]));

        let (masked, _) = topk_rows_local(&g, 3).unwrap();
        assert_eq!(masked, g);

        let equal = mat(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let (_, sel) = topk_rows_local(&equal, 2).unwrap();
        assert_eq!(sel.indices(), &[0, 1]);
    }

    #[test]
    fn coord_topk_examples() {
        assert_eq!(coord_topk(&[-1.0, 0.1], 1).unwrap().0, vec![-1.0, 0.0]);
        assert_eq!(coord_topk(&[1.0, 0.1], 1).unwrap().0, vec![1.0, 0.0]);
        let g = [0.3, -2.0, 0.5];
        assert_eq!(coord_topk(&g, 3).unwrap().0, g.to_vec());
        assert_eq!(coord_topk(&[1.0, -1.0, 1.0], 2).unwrap().1, vec![0, 1]);
        assert!(coord_topk(&g, 4).is_err());
    }

    #[test]
    fn randk_examples() {
        assert_eq!(randk_rows_shared(SeedValue(9), 5, 5).unwrap(), RowSelection::all(5));
        let a = randk_rows_shared(SeedValue(11), 10, 3).unwrap();
        let b = randk_rows_shared(SeedValue(11), 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn randk_rows_are_uniform() {
        let trials = 100_000u64;
        let mut counts = [0u64; 10];
        for s in 0..trials {
            for &row in randk_rows_shared(SeedValue(s), 10, 3).unwrap().indices() {
                counts[row] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.3).abs() <= 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn compression_error_examples() {
        let g = mat(&[[1.0, 2.0]]);
        assert_eq!(compression_error_sq(&g, &g).unwrap(), 0.0);
        assert_eq!(compression_error_sq(&g, &mat(&[[0.0, 0.0]])).unwrap(), 5.0);
        assert!(matches!(
            compression_error_sq(&g, &DenseMatrix::zeros(2, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DenseMatrix> {
            (1..=max_rows, 1..=max_cols).prop_flat_map(|(m, n)| {
                prop::collection::vec(-100.0f64..100.0, m * n)
                    .prop_map(move |d| DenseMatrix::new(m, n, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn selection_is_scale_invariant(p in matrix(12, 4), exp in -8i32..8, k_frac in 0.0f64..1.0) {
                let k = 1 + ((p.rows() - 1) as f64 * k_frac) as usize;
                let (_, base) = row_importance(&p, k).unwrap();
                // Powers of two scale exactly, so even exact ties are kept.
                let (_, scaled) = row_importance(&p.scaled(2f64.powi(exp)), k).unwrap();
                prop_assert_eq!(base, scaled);
            }

            #[test]
            fn selection_is_scale_invariant_for_separated_scores(p in matrix(12, 4), c in 0.01f64..100.0) {
                let sigma = row_norms_sq(&p);
                let mut sorted = sigma.clone();
                sorted.sort_by(f64::total_cmp);
                let separated = sorted.windows(2).all(|w| w[1] - w[0] > 1e-9 * w[1].abs().max(1.0));
                prop_assume!(separated);
                let k = p.rows().div_ceil(2);
                let (_, base) = row_importance(&p, k).unwrap();
                let (_, scaled) = row_importance(&p.scaled(c), k).unwrap();
                prop_assert_eq!(base, scaled);
            }

            #[test]
            fn masking_is_linear(a in matrix(6, 3), seed in any::<u64>(), x in -3.0f64..3.0, y in -3.0f64..3.0) {
                let b = gaussian_matrix(SeedValue(seed), a.rows(), a.cols());
                let sel = randk_rows_shared(SeedValue(seed), a.rows(), a.rows().div_ceil(2)).unwrap();
                let combo: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| x * p + y * q).collect();
                let combo = DenseMatrix::new(a.rows(), a.cols(), combo).unwrap();
                let lhs = mask_rows(&combo, &sel).unwrap();
                let ma = mask_rows(&a, &sel).unwrap();
                let mb = mask_rows(&b, &sel).unwrap();
                for (i, l) in lhs.as_slice().iter().enumerate() {
                    let r = x * ma.as_slice()[i] + y * mb.as_slice()[i];
                    prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
                }
            }

            #[test]
            fn selection_has_exactly_k_sorted_rows(p in matrix(16, 3), k_frac in 0.0f64..1.0) {
                let k = 1 + ((p.rows() - 1) as f64 * k_frac) as usize;
                let (sigma, sel) = row_importance(&p, k).unwrap();
                prop_assert_eq!(sel.len(), k);
                prop_assert!(sel.indices().windows(2).all(|w| w[0] < w[1]));
                // Every kept row scores at least as high as every dropped row.
                let min_kept = sel.indices().iter().map(|&i| sigma[i]).fold(f64::INFINITY, f64::min);
                for (i, s) in sigma.iter().enumerate() {
                    if !sel.contains(i) {
                        prop_assert!(*s <= min_kept);
                    }
                }
            }
        }
    }
}
