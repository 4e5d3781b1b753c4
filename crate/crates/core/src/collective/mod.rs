//! Ring collectives over pluggable transports, and the compressed
//! aggregation strategies built on them.

mod link;
mod ring;
mod strategy;
pub mod tcp;
mod transport;

pub use link::{simulate_transfer, LinkModel, VirtualClock, WorkerTopology};
pub use ring::{
    allgather, chunk_ranges, ring_allreduce, ring_allreduce_fp16, ring_allreduce_in_place,
    ElementCodec,
};
pub use strategy::{
    fp16_allreduce, full_allreduce, masked_allreduce, ternary_allgather_aggregate,
    topk_allgather_aggregate, SyncMode, SyncStats,
};
pub use tcp::{tcp_roundtrip, TcpEndpoint, TcpOptions};
pub use transport::{run_simulated, sim_fabric, CommStats, SimEndpoint, Transport};

/// Closed-form ring all-reduce time for `bytes` split over the ring:
/// `2(n-1) · (latency + ceil(bytes/n)·8 / slowest bandwidth)`.
pub fn ring_allreduce_seconds(
    elements: usize,
    element_bytes: usize,
    topology: &WorkerTopology,
) -> f64 {
    let n = topology.world();
    let link = topology.slowest_link();
    let chunk = elements.div_ceil(n) * element_bytes;
    2.0 * (n - 1) as f64 * link.transfer_seconds(chunk)
}
