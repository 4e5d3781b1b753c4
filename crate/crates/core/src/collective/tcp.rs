//! Length-prefixed TCP framing and a ring transport over it.
//!
//! Frames are a little-endian `u64` byte count followed by the bytes.
//! Connecting retries until the connect timeout (5 s by default) and then
//! fails; there are no retries once a ring is up.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::link::{VirtualClock, WorkerTopology};
use super::transport::{CommStats, Transport};
use crate::error::{Error, Result};

/// Refuse frames above this size instead of allocating them.
pub const MAX_FRAME: u64 = 1 << 32;

#[derive(Debug, Clone, Copy)]
pub struct TcpOptions {
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(120),
        }
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn resolve(addr: impl ToSocketAddrs, peer: usize) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::link(peer, e))?
        .next()
        .ok_or_else(|| Error::link(peer, "address resolved to nothing"))
}

/// Connects, retrying refused attempts until `timeout` has elapsed.
pub fn connect_with_timeout(addr: SocketAddr, peer: usize, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(Error::link(peer, format!("connect to {addr} timed out")));
        }
        match TcpStream::connect_timeout(&addr, left) {
            Ok(s) => {
                s.set_nodelay(true).map_err(|e| Error::link(peer, e))?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::link(peer, format!("connect to {addr}: {e}")))
            }
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Sends one frame to `addr` and returns the peer's reply frame.
pub fn tcp_roundtrip(
    payload: &[u8],
    addr: impl ToSocketAddrs,
    opts: TcpOptions,
) -> Result<Vec<u8>> {
    let addr = resolve(addr, 0)?;
    let mut s = connect_with_timeout(addr, 0, opts.connect_timeout)?;
    s.set_read_timeout(Some(opts.io_timeout))
        .map_err(|e| Error::link(0, e))?;
    write_frame(&mut s, payload).map_err(|e| Error::link(0, e))?;
    read_frame(&mut s).map_err(|e| Error::link(0, e))
}

/// Serves one connection, echoing every frame until the client hangs up.
pub fn serve_echo(listener: &TcpListener) -> io::Result<()> {
    let (mut s, _) = listener.accept()?;
    loop {
        match read_frame(&mut s) {
            Ok(f) => write_frame(&mut s, &f)?,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

/// Ring transport over two TCP connections per worker: one to the ring
/// successor and one from the predecessor.
///
/// Simulated time is charged locally per round as the slower of the
/// outgoing and incoming transfer under the topology's link models.
#[derive(Debug)]
pub struct TcpEndpoint {
    topology: WorkerTopology,
    to_next: TcpStream,
    from_prev: TcpStream,
    clock: VirtualClock,
    bytes_sent: u64,
}

impl TcpEndpoint {
    /// Binds `addrs[rank]` and joins the ring described by `topology`.
    pub fn join(topology: WorkerTopology, addrs: &[SocketAddr], opts: TcpOptions) -> Result<Self> {
        let rank = topology.rank();
        let listener = TcpListener::bind(addrs[rank]).map_err(|e| Error::link(rank, e))?;
        Self::join_with_listener(topology, listener, addrs, opts)
    }

    /// Like [`join`](Self::join) with an already-bound listener, which
    /// lets callers use ephemeral ports.
    pub fn join_with_listener(
        topology: WorkerTopology,
        listener: TcpListener,
        addrs: &[SocketAddr],
        opts: TcpOptions,
    ) -> Result<Self> {
        if addrs.len() != topology.world() {
            return Err(Error::InvalidTopology(format!(
                "{} peer addresses for {} workers",
                addrs.len(),
                topology.world()
            )));
        }
        let next = topology.next();
        let prev = topology.prev();
        let rank = topology.rank();

        // Accept on a helper thread so connecting to `next` cannot deadlock
        // against our own predecessor.
        let accept_timeout = opts.connect_timeout;
        let acceptor = std::thread::spawn(move || accept_from(&listener, prev, accept_timeout));
        let mut to_next = connect_with_timeout(addrs[next], next, opts.connect_timeout)?;
        to_next
            .write_all(&(rank as u64).to_le_bytes())
            .map_err(|e| Error::link(next, e))?;
        let from_prev = acceptor
            .join()
            .map_err(|_| Error::link(prev, "acceptor thread panicked"))??;

        for (s, peer) in [(&to_next, next), (&from_prev, prev)] {
            s.set_read_timeout(Some(opts.io_timeout))
                .and_then(|_| s.set_write_timeout(Some(opts.io_timeout)))
                .map_err(|e| Error::link(peer, e))?;
        }
        Ok(Self {
            topology,
            to_next,
            from_prev,
            clock: VirtualClock::new(),
            bytes_sent: 0,
        })
    }
}

fn accept_from(listener: &TcpListener, prev: usize, timeout: Duration) -> Result<TcpStream> {
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::link(prev, e))?;
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false).map_err(|e| Error::link(prev, e))?;
                s.set_nodelay(true).map_err(|e| Error::link(prev, e))?;
                s.set_read_timeout(Some(timeout))
                    .map_err(|e| Error::link(prev, e))?;
                let mut who = [0u8; 8];
                s.read_exact(&mut who).map_err(|e| Error::link(prev, e))?;
                let who = u64::from_le_bytes(who) as usize;
                if who != prev {
                    return Err(Error::link(
                        prev,
                        format!("expected predecessor {prev}, rank {who} connected"),
                    ));
                }
                return Ok(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::link(prev, "predecessor never connected"));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(Error::link(prev, e)),
        }
    }
}

impl Transport for TcpEndpoint {
    fn topology(&self) -> &WorkerTopology {
        &self.topology
    }

    fn ring_exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>> {
        let next = self.topology.next();
        let prev = self.topology.prev();
        let to_next = &mut self.to_next;
        let from_prev = &mut self.from_prev;
        // Write and read concurrently: every worker sends before it
        // receives, so sequential I/O would deadlock on large frames.
        let (sent, received) = std::thread::scope(|s| {
            let writer = s.spawn(|| write_frame(to_next, &payload));
            let received = read_frame(from_prev);
            (writer.join().expect("writer thread panicked"), received)
        });
        sent.map_err(|e| Error::link(next, e))?;
        let received = received.map_err(|e| Error::link(prev, e))?;

        let out_cost = self
            .topology
            .outgoing_link(self.topology.rank())
            .transfer_seconds(payload.len());
        let in_cost = self
            .topology
            .outgoing_link(prev)
            .transfer_seconds(received.len());
        self.clock.advance(out_cost.max(in_cost));
        self.bytes_sent += payload.len() as u64;
        Ok(received)
    }

    fn charge_compute(&mut self, seconds: f64) {
        self.clock.advance(seconds.max(0.0));
    }

    fn stats(&self) -> CommStats {
        CommStats {
            bytes_sent: self.bytes_sent,
            simulated_seconds: self.clock.now(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_in_memory() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        assert_eq!(&buf[..8], &5u64.to_le_bytes());
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), b"hello");
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = (MAX_FRAME + 1).to_le_bytes().to_vec();
        buf.extend_from_slice(&[0; 4]);
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }
}
