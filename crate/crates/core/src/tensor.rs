//! Flat gradient/weight buffers, the name ↔ offset bucket mapping, and
//! keep/drop masks over those buffers.
//!
//! Every model parameter lives in one contiguous `f32` bucket. Collective
//! and compression code only ever sees the bucket; [`BucketView`] is the
//! side table that maps it back to named parameters.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// One-dimensional `f32` buffer whose elements are always finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatTensor {
    values: Vec<f32>,
}

impl FlatTensor {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "element {i} is {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    /// Number of non-zero elements.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f32>> for FlatTensor {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

/// A named parameter's slot inside a flat bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous mapping from parameter names to bucket ranges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BucketView {
    entries: Vec<BucketEntry>,
    len: usize,
}

impl BucketView {
    /// Builds a view from explicit entries, checking that they tile
    /// `[0, len)` in order with no gaps or overlaps.
    pub fn from_entries(entries: Vec<BucketEntry>, len: usize) -> Result<Self> {
        let mut cursor = 0;
        for e in &entries {
            if e.offset != cursor {
                return Err(Error::InvalidView(format!(
                    "`{}` starts at {} but previous entry ends at {cursor}",
                    e.name, e.offset
                )));
            }
            cursor += e.len;
        }
        if cursor != len {
            return Err(Error::InvalidView(format!(
                "entries cover {cursor} elements, buffer has {len}"
            )));
        }
        Ok(Self { entries, len })
    }

    pub fn entries(&self) -> &[BucketEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, name: &str) -> Option<&BucketEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Concatenates named parameters in registration order into one bucket.
pub fn flatten<S: AsRef<str>>(params: &[(S, Vec<f32>)]) -> Result<(FlatTensor, BucketView)> {
    let mut seen = HashSet::with_capacity(params.len());
    let mut entries = Vec::with_capacity(params.len());
    let mut values = Vec::with_capacity(params.iter().map(|(_, t)| t.len()).sum());
    for (name, tensor) in params {
        let name = name.as_ref();
        if !seen.insert(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        if tensor.is_empty() {
            return Err(Error::EmptyParam(name.to_string()));
        }
        entries.push(BucketEntry {
            name: name.to_string(),
            offset: values.len(),
            len: tensor.len(),
        });
        values.extend_from_slice(tensor);
    }
    let len = values.len();
    Ok((FlatTensor::new(values)?, BucketView { entries, len }))
}

/// Splits a bucket back into named parameters. Exact inverse of [`flatten`].
pub fn unflatten(flat: &FlatTensor, view: &BucketView) -> Result<Vec<(String, Vec<f32>)>> {
    // Views can be hand-built with public fields, so re-check coverage.
    let view = BucketView::from_entries(view.entries.clone(), view.len)?;
    if view.len != flat.len() {
        return Err(Error::InvalidView(format!(
            "view covers {} elements, buffer has {}",
            view.len,
            flat.len()
        )));
    }
    Ok(view
        .entries
        .iter()
        .map(|e| {
            (
                e.name.clone(),
                flat.as_slice()[e.offset..e.offset + e.len].to_vec(),
            )
        })
        .collect())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Keep/drop bit vector over a flat bucket (1 = kept).
///
/// Bits are stored in little-endian order inside `u64` words; bits past
/// `len` in the last word are always zero so the digest is canonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    words: Vec<u64>,
    len: usize,
    nnz: usize,
    digest: u64,
}

impl SparsityMask {
    fn from_words(words: Vec<u64>, len: usize) -> Self {
        let nnz = words.iter().map(|w| w.count_ones() as usize).sum();
        let digest = digest_words(&words);
        Self {
            words,
            len,
            nnz,
            digest,
        }
    }

    pub fn ones(len: usize) -> Self {
        Self::from_fn(len, |_| true)
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_words(vec![0; len.div_ceil(64)], len)
    }

    pub fn from_fn(len: usize, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut words = vec![0u64; len.div_ceil(64)];
        for i in 0..len {
            if keep(i) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self::from_words(words, len)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    /// Mask of the non-zero positions of `values`.
    pub fn nonzero(values: &[f32]) -> Self {
        Self::from_fn(values.len(), |i| values[i] != 0.0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "mask index {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Returns a copy with bit `i` set to `keep`.
    pub fn with_bit(&self, i: usize, keep: bool) -> Self {
        assert!(i < self.len, "mask index {i} out of range {}", self.len);
        let mut words = self.words.clone();
        if keep {
            words[i / 64] |= 1 << (i % 64);
        } else {
            words[i / 64] &= !(1 << (i % 64));
        }
        Self::from_words(words, self.len)
    }

    /// Indices of kept elements in ascending order.
    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }
}

fn digest_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(FNV_OFFSET, |h, w| fnv1a64_extend(h, &w.to_le_bytes()))
}

/// FNV-1a digest of the mask's packed bit words in little-endian byte order.
pub fn mask_digest(mask: &SparsityMask) -> u64 {
    digest_words(&mask.words)
}
