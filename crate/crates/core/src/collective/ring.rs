//! Ring all-reduce (reduce-scatter then all-gather) and ring all-gather.

use std::ops::Range;

use super::transport::Transport;
use crate::codec::to_fp16;
use crate::error::{Error, Result};
use crate::tensor::FlatTensor;

/// How chunk elements travel on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementCodec {
    F32,
    /// binary16 on the wire; partial sums are re-rounded to binary16 at
    /// every hop.
    F16,
}

impl ElementCodec {
    pub fn width(self) -> usize {
        match self {
            ElementCodec::F32 => 4,
            ElementCodec::F16 => 2,
        }
    }

    fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.width());
        match self {
            ElementCodec::F32 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            ElementCodec::F16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&to_fp16(*v).to_bits().to_le_bytes())),
        }
        out
    }

    fn decode(self, bytes: &[u8], expected: usize, peer: usize) -> Result<Vec<f32>> {
        if !bytes.len().is_multiple_of(self.width()) {
            return Err(Error::link(peer, "truncated chunk"));
        }
        if bytes.len() != expected * self.width() {
            return Err(Error::shape(expected, bytes.len() / self.width()));
        }
        Ok(match self {
            ElementCodec::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            ElementCodec::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
                .collect(),
        })
    }

    fn round(self, v: f32) -> f32 {
        match self {
            ElementCodec::F32 => v,
            ElementCodec::F16 => to_fp16(v).to_f32(),
        }
    }
}

/// `ceil(len / n)`-sized chunk boundaries; trailing chunks may be short or
/// empty.
pub fn chunk_ranges(len: usize, n: usize) -> Vec<Range<usize>> {
    let size = len.div_ceil(n);
    (0..n)
        .map(|j| (j * size).min(len)..((j + 1) * size).min(len))
        .collect()
}

/// Elementwise sum across all workers, returned to every worker.
pub fn ring_allreduce<T: Transport + ?Sized>(
    local: &FlatTensor,
    transport: &mut T,
) -> Result<FlatTensor> {
    let mut values = local.clone().into_vec();
    ring_allreduce_in_place(&mut values, transport, ElementCodec::F32)?;
    FlatTensor::new(values)
}

/// Ring all-reduce with binary16 on the wire.
pub fn ring_allreduce_fp16<T: Transport + ?Sized>(
    local: &FlatTensor,
    transport: &mut T,
) -> Result<FlatTensor> {
    let mut values = local.clone().into_vec();
    ring_allreduce_in_place(&mut values, transport, ElementCodec::F16)?;
    FlatTensor::new(values)
}

/// In-place ring all-reduce: `n - 1` reduce-scatter rounds followed by
/// `n - 1` all-gather rounds, each moving one chunk to the ring successor.
pub fn ring_allreduce_in_place<T: Transport + ?Sized>(
    values: &mut [f32],
    transport: &mut T,
    codec: ElementCodec,
) -> Result<()> {
    let topo = transport.topology().clone();
    let n = topo.world();
    let p = topo.position();
    let prev = topo.prev();
    let chunks = chunk_ranges(values.len(), n);

    if codec == ElementCodec::F16 {
        values.iter_mut().for_each(|v| *v = codec.round(*v));
    }

    // Reduce-scatter: after step s, position p holds the partial sum of
    // chunk (p - s - 1) over s + 2 workers.
    for s in 0..n - 1 {
        let send = &chunks[(p + n - s) % n];
        let recv = chunks[(p + 2 * n - s - 1) % n].clone();
        let msg = codec.encode(&values[send.clone()]);
        let incoming = transport.ring_exchange(msg)?;
        let incoming = codec.decode(&incoming, recv.len(), prev)?;
        for (dst, add) in values[recv].iter_mut().zip(incoming) {
            *dst = codec.round(add + *dst);
        }
    }

    // All-gather: position p starts owning chunk (p + 1).
    for s in 0..n - 1 {
        let send = &chunks[(p + 1 + n - s) % n];
        let recv = chunks[(p + n - s) % n].clone();
        let msg = codec.encode(&values[send.clone()]);
        let incoming = transport.ring_exchange(msg)?;
        let incoming = codec.decode(&incoming, recv.len(), prev)?;
        values[recv].copy_from_slice(&incoming);
    }

    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "all-reduce produced a non-finite sum".into(),
        ));
    }
    Ok(())
}

/// Every worker ends with every worker's payload, indexed by rank.
pub fn allgather<T: Transport + ?Sized>(
    payload: Vec<u8>,
    transport: &mut T,
) -> Result<Vec<Vec<u8>>> {
    let topo = transport.topology().clone();
    let n = topo.world();
    let p = topo.position();
    let mut by_position: Vec<Option<Vec<u8>>> = vec![None; n];
    by_position[p] = Some(payload);
    for s in 0..n - 1 {
        let send_origin = (p + n - s) % n;
        let recv_origin = (p + 2 * n - s - 1) % n;
        let msg = by_position[send_origin]
            .clone()
            .expect("forwarded payload present");
        by_position[recv_origin] = Some(transport.ring_exchange(msg)?);
    }
    let mut by_rank = vec![Vec::new(); n];
    for (pos, payload) in by_position.into_iter().enumerate() {
        by_rank[topo.ring()[pos]] = payload.expect("all payloads gathered");
    }
    Ok(by_rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::link::{LinkModel, WorkerTopology};
    use crate::collective::transport::run_simulated;

    #[test]
    fn chunks_cover_exactly() {
        assert_eq!(chunk_ranges(5, 4), vec![0..2, 2..4, 4..5, 5..5]);
        assert_eq!(chunk_ranges(8, 2), vec![0..4, 4..8]);
        assert_eq!(chunk_ranges(0, 3), vec![0..0, 0..0, 0..0]);
    }

    #[test]
    fn two_workers_sum() {
        let topo = WorkerTopology::uniform(2, 0, LinkModel::mbps(100.0)).unwrap();
        let out = run_simulated(&topo, |mut ep| {
            let local = if ep.rank() == 0 {
                vec![1.0, 2.0]
            } else {
                vec![3.0, 4.0]
            };
            ring_allreduce(&FlatTensor::new(local).unwrap(), &mut ep).unwrap()
        });
        for r in out {
            assert_eq!(r.as_slice(), &[4.0, 6.0]);
        }
    }

    #[test]
    fn permuted_ring_and_short_tensors() {
        let l = LinkModel::mbps(100.0);
        let topo = WorkerTopology::new(0, vec![3, 1, 0, 2], vec![l; 4]).unwrap();
        for len in [0usize, 1, 3, 5, 9] {
            let out = run_simulated(&topo, |mut ep| {
                let r = ep.rank() as f32;
                let local: Vec<f32> = (0..len).map(|i| r * 10.0 + i as f32).collect();
                ring_allreduce(&FlatTensor::new(local).unwrap(), &mut ep).unwrap()
            });
            let want: Vec<f32> = (0..len).map(|i| 60.0 + 4.0 * i as f32).collect();
            for r in out {
                assert_eq!(r.as_slice(), want.as_slice());
            }
        }
    }

    #[test]
    fn length_mismatch_fails() {
        let topo = WorkerTopology::uniform(2, 0, LinkModel::mbps(100.0)).unwrap();
        let out = run_simulated(&topo, |mut ep| {
            let len = if ep.rank() == 0 { 8 } else { 10 };
            ring_allreduce(&FlatTensor::zeros(len), &mut ep)
        });
        assert!(out.iter().all(|r| r.is_err()));
        assert!(out
            .iter()
            .any(|r| matches!(r, Err(Error::ShapeMismatch { .. }))));
    }

    #[test]
    fn allgather_by_rank() {
        let l = LinkModel::mbps(100.0);
        let topo = WorkerTopology::new(0, vec![1, 0], vec![l; 2]).unwrap();
        let out = run_simulated(&topo, |mut ep| {
            let me = if ep.rank() == 0 {
                b"a".to_vec()
            } else {
                b"b".to_vec()
            };
            allgather(me, &mut ep).unwrap()
        });
        for r in out {
            assert_eq!(r, vec![b"a".to_vec(), b"b".to_vec()]);
        }
    }

    #[test]
    fn fp16_allreduce_is_replica_consistent() {
        let topo = WorkerTopology::uniform(3, 0, LinkModel::mbps(100.0)).unwrap();
        let out = run_simulated(&topo, |mut ep| {
            let r = ep.rank() as f32;
            let local: Vec<f32> = (0..7).map(|i| 0.1 * (r + 1.0) + i as f32 * 0.001).collect();
            let res = ring_allreduce_fp16(&FlatTensor::new(local).unwrap(), &mut ep).unwrap();
            (res, ep.stats().bytes_sent)
        });
        for (r, bytes) in &out {
            assert_eq!(r, &out[0].0);
            // 2(n-1) rounds of ceil(7/3) = 3 half-precision elements, minus
            // the short trailing chunk
            assert!(*bytes <= 4 * 3 * 2);
        }
        for (i, v) in out[0].0.as_slice().iter().enumerate() {
            let exact = 0.6 + 3.0 * i as f32 * 0.001;
            assert!((v - exact).abs() < 2e-3, "{v} vs {exact}");
        }
    }
}
