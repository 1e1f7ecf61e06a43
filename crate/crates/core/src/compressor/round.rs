//! One compression round executed collectively (SPMD: every rank calls the
//! same function with its own local matrix, in the same order).

use super::{
    coord_topk, gather_rows, mask_rows, randk_rows_shared, row_importance, scatter_rows,
    sketch_local, topk_rows_local, CompressorConfig, Method, RowSelection,
};
use crate::collective::{run_inproc, Comm, CommLedger, Payload, Transport};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{gaussian_matrix, SeedValue};

/// Result of one ARC-Top-K round on one rank.
#[derive(Debug, Clone)]
pub struct ArcRound {
    /// `(1/N) * sum_i C_local(G_i)`, identical on every rank.
    pub global: DenseMatrix,
    /// This rank's `C_local(G_i)`: its own matrix restricted to the shared rows.
    pub local: DenseMatrix,
    pub selection: RowSelection,
    /// Row importance of the averaged sketch.
    pub sigma: Vec<f64>,
}

/// ARC-Top-K:
///
/// 1. broadcast the round seed from rank 0;
/// 2. generate the shared `n x r` Gaussian projection from it;
/// 3. sketch locally, `P_i = G_i V / sqrt(r)`;
/// 4. all-reduce the sketches to the average `P` (`m * r` entries);
/// 5. select the `k` rows with largest `||P_p||^2`, identical on all ranks;
/// 6. all-reduce the selected rows of `G_i`, packed as `k x n`.
pub fn arc_topk_round<T: Transport>(
    comm: &mut Comm<T>,
    local: &DenseMatrix,
    cfg: &CompressorConfig,
    seed: SeedValue,
) -> Result<ArcRound> {
    check_shape(local, cfg)?;
    let seed = comm.broadcast_seed(seed, 0)?;
    let projection = gaussian_matrix(seed, local.cols(), cfg.r);
    let sketch = sketch_local(local, &projection)?;
    let averaged = comm.all_reduce_avg(sketch.as_slice())?;
    let averaged = DenseMatrix::new(cfg.m, cfg.r, averaged)?;
    let (sigma, selection) = row_importance(&averaged, cfg.k)?;
    let global = reduce_selected(comm, local, &selection)?;
    Ok(ArcRound {
        global,
        local: mask_rows(local, &selection)?,
        selection,
        sigma,
    })
}

fn reduce_selected<T: Transport>(
    comm: &mut Comm<T>,
    local: &DenseMatrix,
    selection: &RowSelection,
) -> Result<DenseMatrix> {
    let packed = gather_rows(local, selection)?;
    let summed = comm.all_reduce_avg(packed.as_slice())?;
    scatter_rows(&summed, local.cols(), selection, local.rows())
}

fn check_shape(local: &DenseMatrix, cfg: &CompressorConfig) -> Result<()> {
    if local.rows() != cfg.m {
        return Err(Error::ShapeMismatch {
            expected: (cfg.m, local.cols()),
            actual: local.shape(),
        });
    }
    Ok(())
}

/// One rank's view of a finished round of any [`Method`].
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub global: DenseMatrix,
    pub local: DenseMatrix,
    /// Rows kept on this rank; `None` for dense and coordinate compressors.
    pub selection: Option<RowSelection>,
}

/// Runs one round of `method` on this rank's `local` matrix.
///
/// `seed` is only consumed by the methods that need shared randomness
/// (ARC-Top-K and Rand-K), and only rank 0's value matters.
pub fn compress_round<T: Transport>(
    comm: &mut Comm<T>,
    method: Method,
    local: &DenseMatrix,
    cfg: &CompressorConfig,
    seed: SeedValue,
) -> Result<RoundOutput> {
    check_shape(local, cfg)?;
    let (m, n) = local.shape();
    match method {
        Method::Dense => {
            let avg = comm.all_reduce_avg(local.as_slice())?;
            Ok(RoundOutput {
                global: DenseMatrix::new(m, n, avg)?,
                local: local.clone(),
                selection: None,
            })
        }
        Method::Arc => {
            let round = arc_topk_round(comm, local, cfg, seed)?;
            Ok(RoundOutput {
                global: round.global,
                local: round.local,
                selection: Some(round.selection),
            })
        }
        Method::RandK => {
            let seed = comm.broadcast_seed(seed, 0)?;
            let selection = randk_rows_shared(seed, m, cfg.k)?;
            let global = reduce_selected(comm, local, &selection)?;
            Ok(RoundOutput {
                global,
                local: mask_rows(local, &selection)?,
                selection: Some(selection),
            })
        }
        Method::TopK => {
            let (masked, selection) = topk_rows_local(local, cfg.k)?;
            let packed = gather_rows(local, &selection)?;
            let payload = Payload {
                values: packed.into_vec(),
                indices: selection.indices().iter().map(|&i| i as u32).collect(),
            };
            let gathered = comm.all_gather(payload)?;
            let mut acc = DenseMatrix::zeros(m, n);
            for p in &gathered {
                if p.values.len() != p.indices.len() * n {
                    return Err(Error::Protocol(format!(
                        "row payload of {} values for {} rows of width {n}",
                        p.values.len(),
                        p.indices.len()
                    )));
                }
                for (row_vals, &row) in p.values.chunks_exact(n).zip(&p.indices) {
                    let row = row as usize;
                    if row >= m {
                        return Err(Error::IndexOutOfRange { index: row, rows: m });
                    }
                    for (a, v) in acc.row_mut(row).iter_mut().zip(row_vals) {
                        *a += v;
                    }
                }
            }
            Ok(RoundOutput {
                global: average(acc, gathered.len()),
                local: masked,
                selection: Some(selection),
            })
        }
        Method::CoordTopK => {
            let (kept_dense, kept) = coord_topk(local.as_slice(), cfg.k)?;
            let payload = Payload {
                values: kept.iter().map(|&i| local.as_slice()[i]).collect(),
                indices: kept.iter().map(|&i| i as u32).collect(),
            };
            let gathered = comm.all_gather(payload)?;
            let mut acc = DenseMatrix::zeros(m, n);
            for p in &gathered {
                if p.values.len() != p.indices.len() {
                    return Err(Error::Protocol("coordinate payload length mismatch".into()));
                }
                for (&v, &i) in p.values.iter().zip(&p.indices) {
                    let slot = acc
                        .as_mut_slice()
                        .get_mut(i as usize)
                        .ok_or(Error::IndexOutOfRange {
                            index: i as usize,
                            rows: m * n,
                        })?;
                    *slot += v;
                }
            }
            Ok(RoundOutput {
                global: average(acc, gathered.len()),
                local: DenseMatrix::new(m, n, kept_dense)?,
                selection: None,
            })
        }
    }
}

fn average(mut acc: DenseMatrix, count: usize) -> DenseMatrix {
    let denom = count as f64;
    for a in acc.as_mut_slice() {
        *a /= denom;
    }
    acc
}

/// A round simulated over in-process ranks, one per local matrix.
#[derive(Debug, Clone)]
pub struct GroupRound {
    /// Rank 0's global output.
    pub global: DenseMatrix,
    /// Every rank's global output, for alignment checks.
    pub globals: Vec<DenseMatrix>,
    /// `C_local(G_i)` per rank.
    pub locals: Vec<DenseMatrix>,
    pub selections: Vec<Option<RowSelection>>,
    pub ledgers: Vec<CommLedger>,
}

/// Runs one round with `locals.len()` in-process ranks, rank `i` holding
/// `locals[i]`.
pub fn simulate_round(
    method: Method,
    locals: &[DenseMatrix],
    cfg: &CompressorConfig,
    seed: SeedValue,
) -> Result<GroupRound> {
    let outputs = run_inproc(locals.len(), |comm| {
        let out = compress_round(comm, method, &locals[comm.rank()], cfg, seed)?;
        Ok((out, *comm.ledger()))
    })?;
    let mut round = GroupRound {
        global: outputs[0].0.global.clone(),
        globals: Vec::with_capacity(outputs.len()),
        locals: Vec::with_capacity(outputs.len()),
        selections: Vec::with_capacity(outputs.len()),
        ledgers: Vec::with_capacity(outputs.len()),
    };
    for (out, ledger) in outputs {
        round.globals.push(out.global);
        round.locals.push(out.local);
        round.selections.push(out.selection);
        round.ledgers.push(ledger);
    }
    Ok(round)
}
