//! Point-to-point ring transports.
//!
//! Every collective in this crate is a sequence of synchronous rounds in
//! which each worker sends one message to its ring successor and receives
//! one from its predecessor. [`Transport::ring_exchange`] is that round.

use std::sync::{Arc, Condvar, Mutex};

use super::link::{LinkModel, VirtualClock, WorkerTopology};
use crate::error::{Error, Result};

/// Cumulative traffic and simulated time seen by one worker.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommStats {
    pub bytes_sent: u64,
    pub simulated_seconds: f64,
}

pub trait Transport: Send {
    fn topology(&self) -> &WorkerTopology;

    /// Sends `payload` to the ring successor and returns the predecessor's
    /// message for the same round.
    fn ring_exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>>;

    /// Charges local (non-communication) time to this worker's clock.
    fn charge_compute(&mut self, seconds: f64);

    fn stats(&self) -> CommStats;

    fn rank(&self) -> usize {
        self.topology().rank()
    }

    fn world(&self) -> usize {
        self.topology().world()
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn topology(&self) -> &WorkerTopology {
        (**self).topology()
    }

    fn ring_exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>> {
        (**self).ring_exchange(payload)
    }

    fn charge_compute(&mut self, seconds: f64) {
        (**self).charge_compute(seconds)
    }

    fn stats(&self) -> CommStats {
        (**self).stats()
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn topology(&self) -> &WorkerTopology {
        (**self).topology()
    }

    fn ring_exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>> {
        (**self).ring_exchange(payload)
    }

    fn charge_compute(&mut self, seconds: f64) {
        (**self).charge_compute(seconds)
    }

    fn stats(&self) -> CommStats {
        (**self).stats()
    }
}

#[derive(Debug)]
struct Round {
    generation: u64,
    arrived: usize,
    outbox: Vec<Option<Vec<u8>>>,
    inbox: Vec<Option<Vec<u8>>>,
    clock: VirtualClock,
    closed: bool,
}

#[derive(Debug)]
struct Fabric {
    topology: WorkerTopology,
    round: Mutex<Round>,
    cv: Condvar,
}

/// In-process transport: one endpoint per worker thread, rendezvous-based
/// rounds on a shared virtual clock. The duration of each round is the
/// slowest transfer made in it.
#[derive(Debug)]
pub struct SimEndpoint {
    fabric: Arc<Fabric>,
    topology: WorkerTopology,
    bytes_sent: u64,
    compute_s: f64,
}

/// Builds one connected endpoint per rank of `topology`.
pub fn sim_fabric(topology: &WorkerTopology) -> Vec<SimEndpoint> {
    let n = topology.world();
    let fabric = Arc::new(Fabric {
        topology: topology.clone(),
        round: Mutex::new(Round {
            generation: 0,
            arrived: 0,
            outbox: vec![None; n],
            inbox: vec![None; n],
            clock: VirtualClock::new(),
            closed: false,
        }),
        cv: Condvar::new(),
    });
    (0..n)
        .map(|rank| SimEndpoint {
            fabric: Arc::clone(&fabric),
            topology: topology.with_rank(rank).expect("rank in range"),
            bytes_sent: 0,
            compute_s: 0.0,
        })
        .collect()
}

impl Transport for SimEndpoint {
    fn topology(&self) -> &WorkerTopology {
        &self.topology
    }

    fn ring_exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>> {
        let rank = self.topology.rank();
        let n = self.topology.world();
        let sent = payload.len() as u64;
        let fabric = &*self.fabric;
        let mut round = fabric.round.lock().expect("fabric lock poisoned");
        if round.closed {
            return Err(Error::link(self.topology.next(), "simulated fabric closed"));
        }
        round.outbox[rank] = Some(payload);
        round.arrived += 1;
        let generation = round.generation;
        if round.arrived == n {
            let mut slowest = 0.0f64;
            for from in 0..n {
                let msg = round.outbox[from].take().expect("every worker deposited");
                let link: LinkModel = fabric.topology.outgoing_link(from);
                slowest = slowest.max(link.transfer_seconds(msg.len()));
                let to = fabric
                    .topology
                    .with_rank(from)
                    .expect("rank in range")
                    .next();
                round.inbox[to] = Some(msg);
            }
            round.clock.advance(slowest);
            round.arrived = 0;
            round.generation += 1;
            fabric.cv.notify_all();
        } else {
            while round.generation == generation {
                if round.closed {
                    return Err(Error::link(
                        self.topology.prev(),
                        "peer left the simulated fabric mid-round",
                    ));
                }
                round = fabric.cv.wait(round).expect("fabric lock poisoned");
            }
        }
        let msg = round.inbox[rank].take().expect("round delivered a message");
        drop(round);
        self.bytes_sent += sent;
        Ok(msg)
    }

    fn charge_compute(&mut self, seconds: f64) {
        self.compute_s += seconds.max(0.0);
    }

    fn stats(&self) -> CommStats {
        let clock = self
            .fabric
            .round
            .lock()
            .expect("fabric lock poisoned")
            .clock;
        CommStats {
            bytes_sent: self.bytes_sent,
            simulated_seconds: clock.now() + self.compute_s,
        }
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        if let Ok(mut round) = self.fabric.round.lock() {
            round.closed = true;
            self.fabric.cv.notify_all();
        }
    }
}

/// Runs `work` once per rank on its own thread over a fresh simulated
/// fabric and returns the results in rank order.
pub fn run_simulated<R, F>(topology: &WorkerTopology, work: F) -> Vec<R>
where
    R: Send,
    F: Fn(SimEndpoint) -> R + Sync,
{
    let endpoints = sim_fabric(topology);
    std::thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let work = &work;
                s.spawn(move || work(ep))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
