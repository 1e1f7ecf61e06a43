use std::fmt;

/// Collective primitives that the ledger accounts for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    AllReduce,
    AllGather,
    Broadcast,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [
        Primitive::AllReduce,
        Primitive::AllGather,
        Primitive::Broadcast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::AllReduce => "all_reduce",
            Primitive::AllGather => "all_gather",
            Primitive::Broadcast => "broadcast",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-node count of scalar entries sent, by primitive.
///
/// Entries are abstract scalars (values and indices alike), not bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    all_reduce: u64,
    all_gather: u64,
    broadcast: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, primitive: Primitive, entries: u64) {
        let slot = match primitive {
            Primitive::AllReduce => &mut self.all_reduce,
            Primitive::AllGather => &mut self.all_gather,
            Primitive::Broadcast => &mut self.broadcast,
        };
        *slot = slot
            .checked_add(entries)
            .expect("communication ledger overflow");
    }

    pub fn entries(&self, primitive: Primitive) -> u64 {
        match primitive {
            Primitive::AllReduce => self.all_reduce,
            Primitive::AllGather => self.all_gather,
            Primitive::Broadcast => self.broadcast,
        }
    }

    pub fn total(&self) -> u64 {
        self.all_reduce + self.all_gather + self.broadcast
    }

    /// Entries charged since `earlier`, a snapshot of this same ledger.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        CommLedger {
            all_reduce: self.all_reduce - earlier.all_reduce,
            all_gather: self.all_gather - earlier.all_gather,
            broadcast: self.broadcast - earlier.broadcast,
        }
    }
}
