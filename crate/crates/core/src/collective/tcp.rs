//! TCP ring transport, one OS process per rank.
//!
//! Setup: rank 0 listens on the rendezvous address. Every rank opens its own
//! ring listener on an ephemeral port; ranks `1..N` connect to rank 0 and
//! report `[rank, world_size, ring_port]` in a control frame. Rank 0 replies
//! to each with the full port table, after which every rank connects to its
//! successor `(rank + 1) % N` and accepts from its predecessor.
//!
//! An exchange passes frames around the ring for `N - 1` steps; at step `s`
//! a rank receives the frame that originated at `rank - 1 - s (mod N)`.
//! Outgoing frames go through a writer thread so that all ranks can send
//! before anyone receives without filling socket buffers into a deadlock.

use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::wire::{WireKind, WireMessage};
use super::{Comm, NodeGroup, Transport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TcpOptions {
    /// Limit on connection setup and on any single blocking receive.
    pub timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
        }
    }
}

pub struct TcpTransport {
    group: NodeGroup,
    ring: Option<Ring>,
}

struct Ring {
    from_prev: BufReader<TcpStream>,
    to_next: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    write_error: Arc<Mutex<Option<String>>>,
}

impl TcpTransport {
    /// Joins a group as `rank`. Rank 0 binds `addr`; the others connect to it.
    pub fn connect(
        addr: &str,
        world_size: usize,
        rank: usize,
        opts: TcpOptions,
    ) -> Result<Self> {
        let group = NodeGroup::new(world_size, rank)?;
        if rank == 0 {
            let listener = TcpListener::bind(addr)
                .map_err(|e| Error::transport(format!("cannot bind {addr}: {e}")))?;
            Self::root(listener, world_size, opts)
        } else {
            Self::join(group, addr, opts)
        }
    }

    /// Rank 0 with an already bound rendezvous listener (useful when binding
    /// port 0 and handing the chosen port to spawned ranks).
    pub fn root(listener: TcpListener, world_size: usize, opts: TcpOptions) -> Result<Self> {
        let group = NodeGroup::new(world_size, 0)?;
        if world_size == 1 {
            return Ok(Self { group, ring: None });
        }
        let host = listener.local_addr()?.ip();
        let ring_listener = TcpListener::bind((host, 0))?;
        let mut ports = vec![0u32; world_size];
        ports[0] = ring_listener.local_addr()?.port() as u32;

        let deadline = Instant::now() + opts.timeout;
        listener.set_nonblocking(true)?;
        let mut peers: Vec<Option<TcpStream>> = (0..world_size).map(|_| None).collect();
        let mut joined = 1;
        while joined < world_size {
            let mut stream = accept_before(&listener, deadline)?;
            stream.set_read_timeout(Some(opts.timeout))?;
            let hello = WireMessage::read_from(&mut stream)?;
            let [rank, world, port] = control_words::<3>(&hello)?;
            let (rank, world) = (rank as usize, world as usize);
            if world != world_size || rank == 0 || rank >= world_size || peers[rank].is_some() {
                return Err(Error::transport(format!(
                    "rejected join from rank {rank} claiming world size {world}"
                )));
            }
            ports[rank] = port;
            peers[rank] = Some(stream);
            joined += 1;
        }
        let table = WireMessage::control(ports);
        for stream in peers.iter_mut().flatten() {
            table.write_to(stream)?;
            stream.flush()?;
        }
        let ring = Ring::connect(group, host, &table.indices, &ring_listener, opts)?;
        Ok(Self {
            group,
            ring: Some(ring),
        })
    }

    fn join(group: NodeGroup, addr: &str, opts: TcpOptions) -> Result<Self> {
        let deadline = Instant::now() + opts.timeout;
        let target = resolve(addr)?;
        let mut stream = loop {
            match TcpStream::connect_timeout(&target, Duration::from_millis(500)) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    let _ = e;
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    return Err(Error::transport(format!("cannot reach rank 0 at {addr}: {e}")))
                }
            }
        };
        stream.set_read_timeout(Some(opts.timeout))?;
        stream.set_nodelay(true)?;
        let host = stream.local_addr()?.ip();
        let ring_listener = TcpListener::bind((host, 0))?;
        let port = ring_listener.local_addr()?.port() as u32;
        WireMessage::control(vec![group.rank as u32, group.world_size as u32, port])
            .write_to(&mut stream)?;
        stream.flush()?;
        let table = WireMessage::read_from(&mut stream)?;
        if table.kind != WireKind::Control || table.indices.len() != group.world_size {
            return Err(Error::Protocol("bad port table from rank 0".into()));
        }
        let ring = Ring::connect(group, target.ip(), &table.indices, &ring_listener, opts)?;
        Ok(Self {
            group,
            ring: Some(ring),
        })
    }
}

impl Ring {
    fn connect(
        group: NodeGroup,
        host: IpAddr,
        ports: &[u32],
        listener: &TcpListener,
        opts: TcpOptions,
    ) -> Result<Self> {
        let deadline = Instant::now() + opts.timeout;
        let next = (group.rank + 1) % group.world_size;
        let port = u16::try_from(ports[next])
            .map_err(|_| Error::Protocol(format!("invalid port {}", ports[next])))?;
        let mut out = TcpStream::connect_timeout(&SocketAddr::new(host, port), opts.timeout)
            .map_err(|e| Error::transport(format!("cannot reach rank {next}: {e}")))?;
        out.set_nodelay(true)?;
        WireMessage::control(vec![group.rank as u32]).write_to(&mut out)?;
        out.flush()?;

        listener.set_nonblocking(true)?;
        let mut inbound = accept_before(listener, deadline)?;
        inbound.set_read_timeout(Some(opts.timeout))?;
        let [from] = control_words::<1>(&WireMessage::read_from(&mut inbound)?)?;
        let prev = (group.rank + group.world_size - 1) % group.world_size;
        if from as usize != prev {
            return Err(Error::transport(format!(
                "rank {} expected its predecessor {prev}, got {from}",
                group.rank
            )));
        }

        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let write_error = Arc::new(Mutex::new(None));
        let writer = {
            let write_error = Arc::clone(&write_error);
            thread::spawn(move || write_loop(out, rx, write_error))
        };
        Ok(Self {
            from_prev: BufReader::new(inbound),
            to_next: Some(tx),
            writer: Some(writer),
            write_error,
        })
    }

    fn send(&mut self, bytes: Vec<u8>) -> Result<()> {
        if let Some(e) = self.write_error.lock().unwrap().clone() {
            return Err(Error::transport(format!("send to successor failed: {e}")));
        }
        self.to_next
            .as_ref()
            .expect("sender lives as long as the ring")
            .send(bytes)
            .map_err(|_| Error::transport("writer thread exited"))
    }

    fn recv(&mut self) -> Result<WireMessage> {
        WireMessage::read_from(&mut self.from_prev).map_err(|e| match e {
            Error::Io(io) => Error::transport(format!("receive from predecessor failed: {io}")),
            other => other,
        })
    }
}

impl Drop for Ring {
    fn drop(&mut self) {
        self.to_next.take();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
    }
}

fn write_loop(stream: TcpStream, rx: Receiver<Vec<u8>>, error: Arc<Mutex<Option<String>>>) {
    let mut w = BufWriter::new(stream);
    for bytes in rx {
        if let Err(e) = w.write_all(&bytes).and_then(|_| w.flush()) {
            *error.lock().unwrap() = Some(e.to_string());
            return;
        }
    }
}

impl Transport for TcpTransport {
    fn group(&self) -> NodeGroup {
        self.group
    }

    fn exchange(&mut self, msg: WireMessage) -> Result<Vec<WireMessage>> {
        let n = self.group.world_size;
        let rank = self.group.rank;
        let Some(ring) = self.ring.as_mut() else {
            return Ok(vec![msg]);
        };
        let mut frames: Vec<Option<WireMessage>> = vec![None; n];
        let mut current = msg.encode()?;
        frames[rank] = Some(msg);
        for step in 0..n - 1 {
            ring.send(current)?;
            let received = ring.recv()?;
            let origin = (rank + 2 * n - 1 - step) % n;
            current = received.encode()?;
            frames[origin] = Some(received);
        }
        Ok(frames.into_iter().map(|f| f.expect("every origin visited")).collect())
    }
}

fn accept_before(listener: &TcpListener, deadline: Instant) -> Result<TcpStream> {
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::transport("timed out waiting for peers to connect"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn control_words<const K: usize>(msg: &WireMessage) -> Result<[u32; K]> {
    if msg.kind != WireKind::Control {
        return Err(Error::Protocol(format!("expected control frame, got {:?}", msg.kind)));
    }
    msg.indices
        .as_slice()
        .try_into()
        .map_err(|_| Error::Protocol(format!("control frame needs {K} words")))
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::transport(format!("cannot resolve {addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::transport(format!("{addr} resolved to nothing")))
}

/// Runs `body` once per rank, each rank on its own thread with a real TCP
/// transport over the loopback interface. Results come back in rank order.
///
/// Unlike the in-process runner there is no group abort: a rank that fails
/// mid-run leaves its peers waiting until `opts.timeout`.
pub fn run_tcp_loopback<F, R>(world_size: usize, opts: TcpOptions, body: F) -> Result<Vec<R>>
where
    F: Fn(&mut Comm<TcpTransport>) -> Result<R> + Sync,
    R: Send,
{
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let results: Vec<Result<R>> = thread::scope(|s| {
        let body = &body;
        let addr = &addr;
        let root = s.spawn(move || body(&mut Comm::new(TcpTransport::root(listener, world_size, opts)?)));
        let others: Vec<_> = (1..world_size)
            .map(|rank| {
                s.spawn(move || {
                    body(&mut Comm::new(TcpTransport::connect(addr, world_size, rank, opts)?))
                })
            })
            .collect();
        std::iter::once(root)
            .chain(others)
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::transport("rank thread panicked"))))
            .collect()
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::Payload;

    fn tcp_group<F, R>(n: usize, body: F) -> Vec<R>
    where
        F: Fn(&mut Comm<TcpTransport>) -> R + Sync,
        R: Send,
    {
        let opts = TcpOptions {
            timeout: Duration::from_secs(20),
        };
        run_tcp_loopback(n, opts, |c| Ok(body(c))).unwrap()
    }

    #[test]
    fn ring_all_reduce_and_gather() {
        for n in [1, 2, 3, 5] {
            let out = tcp_group(n, |c| {
                let r = c.rank() as f64;
                let avg = c.all_reduce_avg(&[r, 2.0 * r]).unwrap();
                let got = c
                    .all_gather(Payload {
                        values: vec![r; c.rank() + 1],
                        indices: vec![c.rank() as u32],
                    })
                    .unwrap();
                (avg, got)
            });
            let mean = (0..n).sum::<usize>() as f64 / n as f64;
            for (avg, got) in out {
                assert_eq!(avg, vec![mean, 2.0 * mean]);
                for (i, p) in got.iter().enumerate() {
                    assert_eq!(p.indices, vec![i as u32]);
                    assert_eq!(p.values.len(), i + 1);
                }
            }
        }
    }

    #[test]
    fn large_frames_do_not_deadlock() {
        let out = tcp_group(3, |c| {
            let v = vec![c.rank() as f64; 1 << 18];
            c.all_reduce_avg(&v).unwrap()[0]
        });
        assert_eq!(out, vec![1.0, 1.0, 1.0]);
    }
}
