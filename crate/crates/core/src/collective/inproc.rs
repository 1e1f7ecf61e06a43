use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use super::wire::WireMessage;
use super::{Comm, NodeGroup, Transport};
use crate::error::{Error, Result};

struct HubState {
    slots: Vec<Option<WireMessage>>,
    arrived: usize,
    generation: u64,
    aborted: bool,
}

/// Shared rendezvous for ranks running as threads of one process.
pub struct InProcHub {
    world_size: usize,
    state: Mutex<HubState>,
    cv: Condvar,
}

impl InProcHub {
    pub fn new(world_size: usize) -> Arc<Self> {
        assert!(world_size > 0, "world size must be positive");
        Arc::new(Self {
            world_size,
            state: Mutex::new(HubState {
                slots: vec![None; world_size],
                arrived: 0,
                generation: 0,
                aborted: false,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn transports(self: &Arc<Self>) -> Vec<InProcTransport> {
        (0..self.world_size)
            .map(|rank| InProcTransport {
                rank,
                hub: Arc::clone(self),
            })
            .collect()
    }

    /// Wakes every waiting rank with an error. Used when one rank fails so
    /// the others do not block forever.
    pub fn abort(&self) {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        st.aborted = true;
        self.cv.notify_all();
    }

    fn barrier<'a>(
        &self,
        mut st: std::sync::MutexGuard<'a, HubState>,
    ) -> Result<std::sync::MutexGuard<'a, HubState>> {
        if st.aborted {
            return Err(Error::transport("in-process group aborted"));
        }
        let gen = st.generation;
        st.arrived += 1;
        if st.arrived == self.world_size {
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
            return Ok(st);
        }
        while st.generation == gen && !st.aborted {
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if st.aborted {
            return Err(Error::transport("in-process group aborted"));
        }
        Ok(st)
    }
}

pub struct InProcTransport {
    rank: usize,
    hub: Arc<InProcHub>,
}

impl Transport for InProcTransport {
    fn group(&self) -> NodeGroup {
        NodeGroup {
            world_size: self.hub.world_size,
            rank: self.rank,
        }
    }

    fn exchange(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        if self.hub.world_size == 1 {
            return Ok(vec![msg]);
        }
        let mut st = self.hub.state.lock().unwrap_or_else(|p| p.into_inner());
        st.slots[self.rank] = Some(msg);
        // Everyone has written once this barrier releases.
        let st = self.hub.barrier(st)?;
        let frames = st
            .slots
            .iter()
            .map(|s| s.clone().expect("slot filled before barrier"))
            .collect();
        // Nobody overwrites a slot until everyone has read.
        drop(self.hub.barrier(st)?);
        Ok(frames)
    }
}

/// Runs `body` once per rank on its own thread and returns the per-rank
/// results in rank order. If any rank fails, the group is aborted and the
/// first root-cause error is returned.
pub fn run_inproc<F, R>(world_size: usize, body: F) -> Result<Vec<R>>
where
    F: Fn(&mut Comm<InProcTransport>) -> Result<R> + Sync,
    R: Send,
{
    if world_size == 0 {
        return Err(Error::InvalidConfig("world size must be positive".into()));
    }
    let hub = InProcHub::new(world_size);
    let transports = hub.transports();
    let results: Vec<Result<R>> = thread::scope(|scope| {
        let handles: Vec<_> = transports
            .into_iter()
            .map(|t| {
                let hub = &hub;
                let body = &body;
                scope.spawn(move || {
                    let mut comm = Comm::new(t);
                    let out = body(&mut comm);
                    if out.is_err() {
                        hub.abort();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    hub.abort();
                    Err(Error::transport("rank thread panicked"))
                })
            })
            .collect()
    });

    let mut out = Vec::with_capacity(world_size);
    let mut first_err: Option<Error> = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                let is_abort = matches!(&e, Error::Transport(m) if m.contains("aborted"));
                match &first_err {
                    None => first_err = Some(e),
                    Some(Error::Transport(m)) if m.contains("aborted") && !is_abort => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
