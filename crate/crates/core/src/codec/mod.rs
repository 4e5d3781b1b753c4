//! Gradient codecs: lossless mask packing, stochastic ternarization, FP16
//! and top-k baselines, plus the NMSE distortion metric.

mod wire;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FlatTensor, SparsityMask};

use wire::{count_to_usize, get_f32s, put_f32s};
pub use wire::{PayloadKind, WireHeader, HEADER_LEN, MAGIC, VERSION};

/// Surviving gradient values of a masked bucket, in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedGradient {
    pub mask_digest: u64,
    pub epoch: u32,
    pub values: Vec<f32>,
}

impl PackedGradient {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 4 * self.values.len()
    }

    pub fn header(&self) -> WireHeader {
        WireHeader {
            kind: PayloadKind::Packed,
            epoch: self.epoch,
            mask_digest: self.mask_digest,
            value_count: self.values.len() as u64,
        }
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.header().write(&mut out);
        put_f32s(&mut out, &self.values);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        let (h, body) = WireHeader::parse(bytes)?;
        h.expect_kind(PayloadKind::Packed)?;
        Ok(Self {
            mask_digest: h.mask_digest,
            epoch: h.epoch,
            values: get_f32s(body, count_to_usize(h.value_count)?)?,
        })
    }
}

/// Gathers the kept elements of `grad`. Off-mask elements are never read,
/// so the result is the packing of the GSE-masked gradient.
pub fn pack(grad: &FlatTensor, mask: &SparsityMask, epoch: u32) -> Result<PackedGradient> {
    if grad.len() != mask.len() {
        return Err(Error::shape(mask.len(), grad.len()));
    }
    let g = grad.as_slice();
    Ok(PackedGradient {
        mask_digest: mask.digest(),
        epoch,
        values: mask.kept_indices().map(|i| g[i]).collect(),
    })
}

/// Scatters packed values back to their mask positions; everything else is
/// exactly `0.0`.
pub fn unpack(packed: &PackedGradient, mask: &SparsityMask) -> Result<FlatTensor> {
    if packed.mask_digest != mask.digest() {
        return Err(Error::MaskMismatch {
            payload: packed.mask_digest,
            local: mask.digest(),
        });
    }
    if packed.values.len() != mask.nnz() {
        return Err(Error::CorruptPayload(format!(
            "{} packed values for a mask with {} kept elements",
            packed.values.len(),
            mask.nnz()
        )));
    }
    let mut out = vec![0.0f32; mask.len()];
    for (i, &v) in mask.kept_indices().zip(&packed.values) {
        out[i] = v;
    }
    FlatTensor::new(out)
}

const SIGN_ZERO: u8 = 0b00;
const SIGN_POS: u8 = 0b01;
const SIGN_NEG: u8 = 0b10;

/// Per-element signs in {-1, 0, +1} (2 bits each) and one shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryGradient {
    scale: f32,
    len: usize,
    packed_signs: Vec<u8>,
}

impl TernaryGradient {
    /// Builds from explicit signs. Errors if any sign is outside {-1, 0, 1},
    /// or if a zero scale carries a non-zero sign.
    pub fn from_signs(scale: f32, signs: &[i8]) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::NumericalFailure(format!("ternary scale {scale}")));
        }
        let mut packed_signs = vec![0u8; signs.len().div_ceil(4)];
        for (i, &s) in signs.iter().enumerate() {
            let code = match s {
                0 => SIGN_ZERO,
                1 => SIGN_POS,
                -1 => SIGN_NEG,
                other => return Err(Error::CorruptPayload(format!("sign {other} at {i}"))),
            };
            if scale == 0.0 && code != SIGN_ZERO {
                return Err(Error::CorruptPayload(
                    "non-zero sign with zero scale".into(),
                ));
            }
            packed_signs[i / 4] |= code << (2 * (i % 4));
        }
        Ok(Self {
            scale,
            len: signs.len(),
            packed_signs,
        })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn packed_signs(&self) -> &[u8] {
        &self.packed_signs
    }

    #[inline]
    fn code(&self, i: usize) -> u8 {
        self.packed_signs[i / 4] >> (2 * (i % 4)) & 0b11
    }

    pub fn sign(&self, i: usize) -> i8 {
        match self.code(i) {
            SIGN_POS => 1,
            SIGN_NEG => -1,
            _ => 0,
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.sign(i)).collect()
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 4 + self.packed_signs.len()
    }

    pub fn to_wire(&self, epoch: u32, mask_digest: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        WireHeader {
            kind: PayloadKind::Ternary,
            epoch,
            mask_digest,
            value_count: self.len as u64,
        }
        .write(&mut out);
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.packed_signs);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<(WireHeader, Self)> {
        let (h, body) = WireHeader::parse(bytes)?;
        h.expect_kind(PayloadKind::Ternary)?;
        let len = count_to_usize(h.value_count)?;
        if body.len() != 4 + len.div_ceil(4) {
            return Err(Error::CorruptPayload(format!(
                "ternary body of {} bytes for {len} elements",
                body.len()
            )));
        }
        let scale = f32::from_le_bytes(body[..4].try_into().unwrap());
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::CorruptPayload(format!("ternary scale {scale}")));
        }
        let t = Self {
            scale,
            len,
            packed_signs: body[4..].to_vec(),
        };
        for i in 0..len {
            if t.code(i) == 0b11 {
                return Err(Error::CorruptPayload(format!(
                    "reserved sign pattern at {i}"
                )));
            }
        }
        let tail = len % 4;
        if tail != 0 && t.packed_signs[len / 4] >> (2 * tail) != 0 {
            return Err(Error::CorruptPayload("non-zero padding bits".into()));
        }
        if scale == 0.0 && (0..len).any(|i| t.code(i) != SIGN_ZERO) {
            return Err(Error::CorruptPayload(
                "non-zero sign with zero scale".into(),
            ));
        }
        Ok((h, t))
    }
}

/// Stochastic ternarization: `s = max|g|`, element `i` becomes `sign(g_i)`
/// with probability `|g_i| / s` and 0 otherwise, so `E[s·sign_i] = g_i`.
pub fn ternarize(grad: &FlatTensor, seed: u64) -> TernaryGradient {
    ternarize_slice(grad.as_slice(), seed)
}

pub(crate) fn ternarize_slice(g: &[f32], seed: u64) -> TernaryGradient {
    let scale = g.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut packed_signs = vec![0u8; g.len().div_ceil(4)];
    if scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = 1.0 / f64::from(scale);
        for (i, &v) in g.iter().enumerate() {
            let p = f64::from(v.abs()) * inv;
            let u: f64 = rng.random();
            if v != 0.0 && u < p {
                let code = if v > 0.0 { SIGN_POS } else { SIGN_NEG };
                packed_signs[i / 4] |= code << (2 * (i % 4));
            }
        }
    }
    TernaryGradient {
        scale,
        len: g.len(),
        packed_signs,
    }
}

/// Decodes to `s · sign_i`.
pub fn deternarize(t: &TernaryGradient) -> FlatTensor {
    FlatTensor::new((0..t.len).map(|i| t.scale * f32::from(t.sign(i))).collect())
        .expect("finite scale times a sign is finite")
}

/// Largest finite binary16 value.
pub const FP16_MAX: f32 = 65504.0;

/// Converts one value to binary16 with round-to-nearest-even, clamping
/// overflow to ±65504 instead of producing infinity.
pub fn to_fp16(v: f32) -> f16 {
    f16::from_f32(v.clamp(-FP16_MAX, FP16_MAX))
}

pub fn fp16_roundtrip(grad: &FlatTensor) -> FlatTensor {
    FlatTensor::new(
        grad.as_slice()
            .iter()
            .map(|&v| to_fp16(v).to_f32())
            .collect(),
    )
    .expect("binary16 values are finite")
}

pub fn encode_fp16(values: &[f32], epoch: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * values.len());
    WireHeader {
        kind: PayloadKind::Fp16,
        epoch,
        mask_digest: 0,
        value_count: values.len() as u64,
    }
    .write(&mut out);
    for &v in values {
        out.extend_from_slice(&to_fp16(v).to_bits().to_le_bytes());
    }
    out
}

pub fn decode_fp16(bytes: &[u8]) -> Result<(WireHeader, Vec<f32>)> {
    let (h, body) = WireHeader::parse(bytes)?;
    h.expect_kind(PayloadKind::Fp16)?;
    let n = count_to_usize(h.value_count)?;
    if body.len() != 2 * n {
        return Err(Error::CorruptPayload(format!(
            "fp16 body of {} bytes for {n} values",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(2)
        .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
        .collect::<Vec<_>>();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptPayload("non-finite fp16 value".into()));
    }
    Ok((h, values))
}

pub fn encode_full(values: &[f32], epoch: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    WireHeader {
        kind: PayloadKind::Full,
        epoch,
        mask_digest: 0,
        value_count: values.len() as u64,
    }
    .write(&mut out);
    put_f32s(&mut out, values);
    out
}

pub fn decode_full(bytes: &[u8]) -> Result<(WireHeader, Vec<f32>)> {
    let (h, body) = WireHeader::parse(bytes)?;
    h.expect_kind(PayloadKind::Full)?;
    let values = get_f32s(body, count_to_usize(h.value_count)?)?;
    Ok((h, values))
}

/// The `k` largest-magnitude elements with their (strictly increasing)
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKPayload {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
    pub original_len: usize,
}

impl TopKPayload {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 8 * self.indices.len()
    }

    pub fn to_wire(&self, epoch: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        WireHeader {
            kind: PayloadKind::TopK,
            epoch,
            mask_digest: 0,
            value_count: self.indices.len() as u64,
        }
        .write(&mut out);
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        put_f32s(&mut out, &self.values);
        out
    }

    /// The wire form omits the dense length; the receiver supplies it.
    pub fn from_wire(bytes: &[u8], original_len: usize) -> Result<Self> {
        let (h, body) = WireHeader::parse(bytes)?;
        h.expect_kind(PayloadKind::TopK)?;
        let k = count_to_usize(h.value_count)?;
        if body.len() != 8 * k {
            return Err(Error::CorruptPayload(format!(
                "top-k body of {} bytes for {k} entries",
                body.len()
            )));
        }
        let (idx_bytes, val_bytes) = body.split_at(4 * k);
        let indices: Vec<u32> = idx_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CorruptPayload(
                "top-k indices not strictly increasing".into(),
            ));
        }
        if indices.last().is_some_and(|&i| i as usize >= original_len) {
            return Err(Error::CorruptPayload("top-k index out of range".into()));
        }
        let values = get_f32s(val_bytes, k)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptPayload("non-finite top-k value".into()));
        }
        Ok(Self {
            indices,
            values,
            original_len,
        })
    }

    /// Adds the selected values into a dense accumulator.
    pub fn scatter_add(&self, dense: &mut [f32]) -> Result<()> {
        if dense.len() != self.original_len {
            return Err(Error::shape(self.original_len, dense.len()));
        }
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dense[i as usize] += v;
        }
        Ok(())
    }

    pub fn to_dense(&self) -> FlatTensor {
        let mut dense = vec![0.0; self.original_len];
        self.scatter_add(&mut dense).expect("length matches");
        FlatTensor::new(dense).expect("selected values are finite")
    }
}

/// Number of elements kept at `rate`: `max(1, floor(rate · len))`, capped at
/// `len`.
pub fn topk_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).floor() as usize).max(1).min(len)
}

/// Selects the `topk_count(len, rate)` largest |g|, lower index first on
/// ties.
pub fn topk_select(grad: &FlatTensor, rate: f64) -> Result<TopKPayload> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    let g = grad.as_slice();
    if g.len() > u32::MAX as usize {
        return Err(Error::InvalidRate(rate));
    }
    let k = topk_count(g.len(), rate);
    let mut order: Vec<usize> = (0..g.len()).collect();
    let by_rank = |a: &usize, b: &usize| g[*b].abs().total_cmp(&g[*a].abs()).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    Ok(TopKPayload {
        indices: order.iter().map(|&i| i as u32).collect(),
        values: order.iter().map(|&i| g[i]).collect(),
        original_len: g.len(),
    })
}

/// `‖x − x̂‖² / ‖x‖²`.
pub fn nmse(x: &FlatTensor, x_hat: &FlatTensor) -> Result<f32> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(x.len(), x_hat.len()));
    }
    let (err, norm) =
        x.as_slice()
            .iter()
            .zip(x_hat.as_slice())
            .fold((0.0f64, 0.0f64), |(e, n), (&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                (e + d * d, n + f64::from(a) * f64::from(a))
            });
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("NMSE with a zero reference vector"));
    }
    Ok((err / norm) as f32)
}
