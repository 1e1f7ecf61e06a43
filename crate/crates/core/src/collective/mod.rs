//! Collective communication over `N` ranks with exact entry accounting.
//!
//! A [`Transport`] only knows how to exchange one frame per rank with every
//! other rank (a raw all-gather). [`Comm`] builds the collectives on top of
//! it, so reductions are computed by the same code, in the same ascending
//! rank order, whatever moves the bytes. That is what makes the in-process
//! and TCP transports bit-identical.
//!
//! Ledger conventions, per node and per call:
//!
//! | primitive        | entries charged            |
//! |------------------|----------------------------|
//! | `all_reduce_avg` | `2 * L`                    |
//! | `all_gather`     | `(N - 1) * (values + idx)` |
//! | `broadcast_seed` | `0`                        |
//!
//! Nothing is charged when `N = 1`.

mod audit;
mod inproc;
mod ledger;
mod tcp;
pub mod wire;

pub use audit::{audit_round, expected_entries, AuditDims, AuditReport};
pub use inproc::{run_inproc, InProcHub, InProcTransport};
pub use ledger::{CommLedger, Primitive};
pub use tcp::{run_tcp_loopback, TcpOptions, TcpTransport};

use crate::error::{Error, Result};
use crate::rng::SeedValue;
use wire::{WireKind, WireMessage};

/// Position of one rank within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeGroup {
    pub world_size: usize,
    pub rank: usize,
}

impl NodeGroup {
    pub fn new(world_size: usize, rank: usize) -> Result<Self> {
        if world_size == 0 || rank >= world_size {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} is not valid in a group of {world_size}"
            )));
        }
        Ok(Self { world_size, rank })
    }
}

/// Moves frames between ranks.
pub trait Transport: Send {
    fn group(&self) -> NodeGroup;

    /// Sends `msg` to every other rank and returns all ranks' frames in rank
    /// order (this rank's own frame included at its position). Every rank
    /// must call this the same number of times, in the same order.
    fn exchange(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn group(&self) -> NodeGroup {
        (**self).group()
    }

    fn exchange(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        (**self).exchange(msg)
    }
}

/// Values plus an optional index list contributed to an all-gather.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Payload {
    pub values: Vec<f64>,
    pub indices: Vec<u32>,
}

impl Payload {
    pub fn entries(&self) -> u64 {
        (self.values.len() + self.indices.len()) as u64
    }
}

/// A rank's handle on the group: collectives plus the rank's ledger.
pub struct Comm<T> {
    transport: T,
    group: NodeGroup,
    ledger: CommLedger,
}

impl<T: Transport> Comm<T> {
    pub fn new(transport: T) -> Self {
        let group = transport.group();
        Self {
            transport,
            group,
            ledger: CommLedger::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.group.rank
    }

    pub fn world_size(&self) -> usize {
        self.group.world_size
    }

    pub fn group(&self) -> NodeGroup {
        self.group
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    fn charge(&mut self, primitive: Primitive, entries: u64) {
        if self.group.world_size > 1 {
            self.ledger.charge(primitive, entries);
        }
    }

    /// Elementwise average of `local` across ranks. The sum is accumulated in
    /// ascending rank order and divided by `N` once, so every rank gets the
    /// same bits.
    pub fn all_reduce_avg(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        let n = self.world_size();
        if n == 1 {
            return Ok(local.to_vec());
        }
        let frames = self.transport.exchange(WireMessage::dense(local.to_vec()))?;
        let expected = frames[0].values.len();
        for (rank, frame) in frames.iter().enumerate() {
            if frame.kind != WireKind::Dense {
                return Err(Error::Protocol(format!(
                    "rank {rank} sent {:?} during all-reduce",
                    frame.kind
                )));
            }
            if frame.values.len() != expected {
                return Err(Error::LengthMismatch {
                    rank,
                    expected,
                    actual: frame.values.len(),
                });
            }
        }
        let mut acc = frames[0].values.clone();
        for frame in &frames[1..] {
            for (a, v) in acc.iter_mut().zip(&frame.values) {
                *a += v;
            }
        }
        let denom = n as f64;
        for a in &mut acc {
            *a /= denom;
        }
        self.charge(Primitive::AllReduce, 2 * local.len() as u64);
        Ok(acc)
    }

    /// Variable-length all-gather. Element `i` of the result is rank `i`'s
    /// payload.
    pub fn all_gather(&mut self, payload: Payload) -> Result<Vec<Payload>> {
        let n = self.world_size();
        if n == 1 {
            return Ok(vec![payload]);
        }
        let entries = payload.entries();
        let frames = self
            .transport
            .exchange(WireMessage::indexed(payload.values, payload.indices))?;
        let gathered = frames
            .into_iter()
            .enumerate()
            .map(|(rank, f)| {
                if f.kind != WireKind::Indexed {
                    return Err(Error::Protocol(format!(
                        "rank {rank} sent {:?} during all-gather",
                        f.kind
                    )));
                }
                Ok(Payload {
                    values: f.values,
                    indices: f.indices,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.charge(Primitive::AllGather, (n as u64 - 1) * entries);
        Ok(gathered)
    }

    /// Every rank returns `root`'s seed.
    pub fn broadcast_seed(&mut self, seed: SeedValue, root: usize) -> Result<SeedValue> {
        let n = self.world_size();
        if root >= n {
            return Err(Error::InvalidConfig(format!(
                "broadcast root {root} outside group of {n}"
            )));
        }
        if n == 1 {
            return Ok(seed);
        }
        let frames = self.transport.exchange(WireMessage::seed(seed.0))?;
        let value = frames[root].seed_value()?;
        self.charge(Primitive::Broadcast, 0);
        Ok(SeedValue(value))
    }
}

/// Single-rank transport; every collective is the identity.
#[derive(Debug, Default, Clone, Copy)]
pub struct SoloTransport;

impl Transport for SoloTransport {
    fn group(&self) -> NodeGroup {
        NodeGroup {
            world_size: 1,
            rank: 0,
        }
    }

    fn exchange(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        Ok(vec![msg])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solo_collectives_are_free_identities() {
        let mut comm = Comm::new(SoloTransport);
        assert_eq!(comm.all_reduce_avg(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let p = Payload {
            values: vec![1.0],
            indices: vec![0],
        };
        assert_eq!(comm.all_gather(p.clone()).unwrap(), vec![p]);
        assert_eq!(comm.broadcast_seed(SeedValue(5), 0).unwrap(), SeedValue(5));
        assert_eq!(comm.ledger().total(), 0);
        assert!(comm.broadcast_seed(SeedValue(5), 1).is_err());
    }

    #[test]
    fn node_group_validates_rank() {
        assert!(NodeGroup::new(4, 3).is_ok());
        assert!(NodeGroup::new(4, 4).is_err());
        assert!(NodeGroup::new(0, 0).is_err());
    }
}
