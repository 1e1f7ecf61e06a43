//! Closed-form per-node communication of one compression round, checked
//! against an observed ledger.

use super::CommLedger;
use crate::compressor::Method;
use crate::error::{Error, Result};

/// Dimensions of one compressed `m x n` block on `world_size` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditDims {
    pub m: usize,
    pub n: usize,
    pub world_size: usize,
    pub k: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub method: Method,
    pub rank: usize,
    pub expected: u64,
    pub observed: u64,
}

/// Entries one node sends during one round of `method`:
///
/// * dense: `2mn`
/// * row Top-K: `(N-1)(nK + K)`
/// * Rand-K: `2Kn`
/// * ARC-Top-K: `2Kn + 2mr`
/// * coordinate Top-K: `(N-1)(K + K)`
///
/// A single node communicates nothing.
pub fn expected_entries(method: Method, dims: AuditDims) -> u64 {
    let AuditDims {
        m,
        n,
        world_size,
        k,
        r,
    } = dims;
    if world_size <= 1 {
        return 0;
    }
    let (m, n, world, k, r) = (m as u64, n as u64, world_size as u64, k as u64, r as u64);
    match method {
        Method::Dense => 2 * m * n,
        Method::TopK => (world - 1) * (n * k + k),
        Method::RandK => 2 * k * n,
        Method::Arc => 2 * k * n + 2 * m * r,
        Method::CoordTopK => (world - 1) * 2 * k,
    }
}

/// Compares the entries a node was charged over exactly one round with the
/// closed form.
pub fn audit_round(
    method: Method,
    dims: AuditDims,
    rank: usize,
    round: &CommLedger,
) -> Result<AuditReport> {
    let expected = expected_entries(method, dims);
    let observed = round.total();
    if expected != observed {
        return Err(Error::AuditMismatch {
            method: method.name().to_string(),
            rank,
            expected,
            observed,
        });
    }
    Ok(AuditReport {
        method,
        rank,
        expected,
        observed,
    })
}
