use crate::error::{Error, Result};

/// Bandwidth/latency pair for one directed link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    bandwidth_bps: f64,
    latency_s: f64,
}

impl LinkModel {
    pub fn new(bandwidth_bps: f64, latency_s: f64) -> Result<Self> {
        if !(bandwidth_bps > 0.0 && bandwidth_bps.is_finite()) {
            return Err(Error::InvalidTopology(format!(
                "bandwidth must be positive, got {bandwidth_bps}"
            )));
        }
        if !(latency_s >= 0.0 && latency_s.is_finite()) {
            return Err(Error::InvalidTopology(format!(
                "latency must be non-negative, got {latency_s}"
            )));
        }
        Ok(Self {
            bandwidth_bps,
            latency_s,
        })
    }

    pub fn mbps(mbps: f64) -> Self {
        Self::new(mbps * 1e6, 0.0).expect("positive bandwidth")
    }

    pub fn bandwidth_bps(&self) -> f64 {
        self.bandwidth_bps
    }

    pub fn latency_s(&self) -> f64 {
        self.latency_s
    }

    /// `latency + bytes·8 / bandwidth`.
    pub fn transfer_seconds(&self, bytes: usize) -> f64 {
        self.latency_s + bytes as f64 * 8.0 / self.bandwidth_bps
    }
}

/// Monotone simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualClock {
    now_s: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now_s
    }

    pub fn advance(&mut self, dt: f64) {
        debug_assert!(dt >= 0.0, "clock cannot run backwards");
        self.now_s += dt.max(0.0);
    }
}

/// Charges one transfer to the clock and returns its duration.
pub fn simulate_transfer(bytes: usize, link: &LinkModel, clock: &mut VirtualClock) -> f64 {
    let dt = link.transfer_seconds(bytes);
    clock.advance(dt);
    dt
}

/// Ring layout of `n` workers and the link leaving each ring position.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerTopology {
    rank: usize,
    ring: Vec<usize>,
    links: Vec<LinkModel>,
}

impl WorkerTopology {
    /// Ring `0 → 1 → … → n-1 → 0` with the same link everywhere.
    pub fn uniform(n: usize, rank: usize, link: LinkModel) -> Result<Self> {
        Self::new(rank, (0..n).collect(), vec![link; n])
    }

    /// `links[p]` is the link from `ring[p]` to `ring[(p + 1) % n]`.
    pub fn new(rank: usize, ring: Vec<usize>, links: Vec<LinkModel>) -> Result<Self> {
        let n = ring.len();
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "a ring needs at least 2 workers, got {n}"
            )));
        }
        let mut seen = vec![false; n];
        for &r in &ring {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidTopology(format!(
                    "ring order {ring:?} is not a permutation of 0..{n}"
                )));
            }
        }
        if links.len() != n {
            return Err(Error::InvalidTopology(format!(
                "{} links for {n} ring edges",
                links.len()
            )));
        }
        if rank >= n {
            return Err(Error::InvalidTopology(format!(
                "rank {rank} outside 0..{n}"
            )));
        }
        Ok(Self { rank, ring, links })
    }

    pub fn with_rank(&self, rank: usize) -> Result<Self> {
        Self::new(rank, self.ring.clone(), self.links.clone())
    }

    pub fn world(&self) -> usize {
        self.ring.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ring(&self) -> &[usize] {
        &self.ring
    }

    pub fn links(&self) -> &[LinkModel] {
        &self.links
    }

    pub fn position_of(&self, rank: usize) -> usize {
        self.ring
            .iter()
            .position(|&r| r == rank)
            .expect("validated permutation contains every rank")
    }

    /// This worker's ring position.
    pub fn position(&self) -> usize {
        self.position_of(self.rank)
    }

    pub fn next(&self) -> usize {
        self.ring[(self.position() + 1) % self.world()]
    }

    pub fn prev(&self) -> usize {
        let n = self.world();
        self.ring[(self.position() + n - 1) % n]
    }

    /// Link leaving `rank` towards its ring successor.
    pub fn outgoing_link(&self, rank: usize) -> LinkModel {
        self.links[self.position_of(rank)]
    }

    pub fn slowest_link(&self) -> LinkModel {
        *self
            .links
            .iter()
            .min_by(|a, b| a.bandwidth_bps.total_cmp(&b.bandwidth_bps))
            .expect("ring has links")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_time() {
        let mut clock = VirtualClock::new();
        let dt = simulate_transfer(12_500_000, &LinkModel::mbps(100.0), &mut clock);
        assert_eq!(dt, 1.0);
        assert_eq!(clock.now(), 1.0);
        let lat = LinkModel::new(1e9, 0.25).unwrap();
        assert_eq!(simulate_transfer(0, &lat, &mut clock), 0.25);
        assert_eq!(clock.now(), 1.25);
    }

    #[test]
    fn invalid_links_rejected() {
        assert!(LinkModel::new(0.0, 0.0).is_err());
        assert!(LinkModel::new(1.0, -1.0).is_err());
        assert!(LinkModel::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn topology_validation() {
        let l = LinkModel::mbps(100.0);
        assert!(WorkerTopology::uniform(1, 0, l).is_err());
        assert!(WorkerTopology::new(0, vec![0, 0, 1], vec![l; 3]).is_err());
        assert!(WorkerTopology::new(0, vec![0, 1], vec![l; 3]).is_err());
        assert!(WorkerTopology::uniform(2, 2, l).is_err());
        let t = WorkerTopology::new(2, vec![2, 0, 1], vec![l; 3]).unwrap();
        assert_eq!((t.position(), t.next(), t.prev()), (0, 0, 1));
    }
}
