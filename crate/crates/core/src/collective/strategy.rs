//! Gradient aggregation strategies built on the ring primitives.
//!
//! The masked strategies first all-gather one wire header per worker. The
//! compressed path is taken only if every header advertises it with the
//! same mask digest and value count; otherwise all workers fall back to a
//! full all-reduce of the raw bucket together.

use std::fmt;
use std::str::FromStr;

use super::ring::{allgather, ring_allreduce, ring_allreduce_fp16};
use super::transport::{CommStats, Transport};
use crate::codec::topk_select;
use crate::codec::{
    pack, ternarize_slice, unpack, PackedGradient, PayloadKind, TernaryGradient, TopKPayload,
    WireHeader,
};
use crate::error::{Error, Result};
use crate::sparsity::MaskStatus;
use crate::tensor::{FlatTensor, SparsityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyncMode {
    FullAllReduce,
    PackedAllReduce,
    TernaryAllGather,
    TopKAllGather,
    Fp16AllReduce,
}

impl SyncMode {
    pub const ALL: [SyncMode; 5] = [
        SyncMode::FullAllReduce,
        SyncMode::PackedAllReduce,
        SyncMode::TernaryAllGather,
        SyncMode::TopKAllGather,
        SyncMode::Fp16AllReduce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::FullAllReduce => "full",
            SyncMode::PackedAllReduce => "packed",
            SyncMode::TernaryAllGather => "ternary",
            SyncMode::TopKAllGather => "topk",
            SyncMode::Fp16AllReduce => "fp16",
        }
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyncMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sync mode `{s}`")))
    }
}

/// Cost and outcome of one aggregation call on one worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncStats {
    pub bytes_on_wire: u64,
    pub simulated_seconds: f64,
    pub mode_used: SyncMode,
}

fn measure<T, R>(
    transport: &mut T,
    f: impl FnOnce(&mut T) -> Result<(R, SyncMode)>,
) -> Result<(R, SyncStats)>
where
    T: Transport + ?Sized,
{
    let before: CommStats = transport.stats();
    let (out, mode_used) = f(transport)?;
    let after = transport.stats();
    Ok((
        out,
        SyncStats {
            bytes_on_wire: after.bytes_sent - before.bytes_sent,
            simulated_seconds: after.simulated_seconds - before.simulated_seconds,
            mode_used,
        },
    ))
}

/// Plain ring all-reduce of the whole bucket (sum).
pub fn full_allreduce<T: Transport + ?Sized>(
    grad: &FlatTensor,
    transport: &mut T,
) -> Result<(FlatTensor, SyncStats)> {
    measure(transport, |t| {
        Ok((ring_allreduce(grad, t)?, SyncMode::FullAllReduce))
    })
}

/// Ring all-reduce with binary16 elements on the wire (sum).
pub fn fp16_allreduce<T: Transport + ?Sized>(
    grad: &FlatTensor,
    transport: &mut T,
) -> Result<(FlatTensor, SyncStats)> {
    measure(transport, |t| {
        Ok((ring_allreduce_fp16(grad, t)?, SyncMode::Fp16AllReduce))
    })
}

/// Whether every gathered header advertises `kind` for the same mask.
fn headers_agree(headers: &[Vec<u8>], kind: PayloadKind) -> Result<bool> {
    let mut first: Option<WireHeader> = None;
    for raw in headers {
        let (h, _) = WireHeader::parse(raw)?;
        if h.kind != kind {
            return Ok(false);
        }
        match first {
            None => first = Some(h),
            Some(f) if f.mask_digest != h.mask_digest || f.value_count != h.value_count => {
                return Ok(false)
            }
            Some(_) => {}
        }
    }
    Ok(true)
}

/// Mask-packed all-reduce (sum). Sends only the kept elements when every
/// worker is stable on the same mask, otherwise all-reduces `grad` in full.
pub fn masked_allreduce<T: Transport + ?Sized>(
    grad: &FlatTensor,
    mask: &SparsityMask,
    status: MaskStatus,
    transport: &mut T,
    epoch: u32,
) -> Result<(FlatTensor, SyncStats)> {
    if grad.len() != mask.len() {
        return Err(Error::shape(mask.len(), grad.len()));
    }
    measure(transport, |t| {
        let kind = match status {
            MaskStatus::Stable => PayloadKind::Packed,
            MaskStatus::Unstable => PayloadKind::Full,
        };
        let header = WireHeader {
            kind,
            epoch,
            mask_digest: mask.digest(),
            value_count: mask.nnz() as u64,
        };
        let headers = allgather(header.to_bytes(), t)?;
        if !headers_agree(&headers, PayloadKind::Packed)? {
            return Ok((ring_allreduce(grad, t)?, SyncMode::FullAllReduce));
        }
        let packed = pack(grad, mask, epoch)?;
        let dense = FlatTensor::new(packed.values)?;
        let summed = ring_allreduce(&dense, t)?;
        let summed = PackedGradient {
            mask_digest: mask.digest(),
            epoch,
            values: summed.into_vec(),
        };
        Ok((unpack(&summed, mask)?, SyncMode::PackedAllReduce))
    })
}

/// Packs, ternarizes and all-gathers `(scale, signs)`; returns the mean of
/// the decoded contributions `(1/n) Σ s_i·sign_i`. Falls back to a full
/// all-reduce (divided by `n`) unless all workers are stable on one mask.
pub fn ternary_allgather_aggregate<T: Transport + ?Sized>(
    grad: &FlatTensor,
    mask: &SparsityMask,
    status: MaskStatus,
    transport: &mut T,
    epoch: u32,
    seed: u64,
) -> Result<(FlatTensor, SyncStats)> {
    if grad.len() != mask.len() {
        return Err(Error::shape(mask.len(), grad.len()));
    }
    let n = transport.world();
    measure(transport, |t| {
        let msg = match status {
            MaskStatus::Stable => {
                let packed = pack(grad, mask, epoch)?;
                ternarize_slice(&packed.values, seed).to_wire(epoch, mask.digest())
            }
            MaskStatus::Unstable => WireHeader {
                kind: PayloadKind::Full,
                epoch,
                mask_digest: mask.digest(),
                value_count: 0,
            }
            .to_bytes(),
        };
        let gathered = allgather(msg, t)?;
        if !headers_agree(&gathered, PayloadKind::Ternary)? {
            let sum = ring_allreduce(grad, t)?;
            let mean = sum.as_slice().iter().map(|v| v / n as f32).collect();
            return Ok((FlatTensor::new(mean)?, SyncMode::FullAllReduce));
        }
        let mut acc = vec![0.0f64; mask.nnz()];
        for raw in &gathered {
            let (_, tern) = TernaryGradient::from_wire(raw)?;
            if tern.len() != acc.len() {
                return Err(Error::CorruptPayload(format!(
                    "ternary payload of {} elements for {} kept",
                    tern.len(),
                    acc.len()
                )));
            }
            let s = f64::from(tern.scale());
            for (j, a) in acc.iter_mut().enumerate() {
                *a += s * f64::from(tern.sign(j));
            }
        }
        let mean = PackedGradient {
            mask_digest: mask.digest(),
            epoch,
            values: acc.into_iter().map(|v| (v / n as f64) as f32).collect(),
        };
        Ok((unpack(&mean, mask)?, SyncMode::TernaryAllGather))
    })
}

/// Top-k selection per worker, all-gathered and summed densely in rank
/// order (sum).
pub fn topk_allgather_aggregate<T: Transport + ?Sized>(
    grad: &FlatTensor,
    rate: f64,
    transport: &mut T,
    epoch: u32,
) -> Result<(FlatTensor, SyncStats)> {
    let payload = topk_select(grad, rate)?;
    measure(transport, |t| {
        let gathered = allgather(payload.to_wire(epoch), t)?;
        let mut dense = vec![0.0f32; grad.len()];
        for raw in &gathered {
            TopKPayload::from_wire(raw, grad.len())?.scatter_add(&mut dense)?;
        }
        Ok((FlatTensor::new(dense)?, SyncMode::TopKAllGather))
    })
}
