//! Binary masks aligned to the flat parameter layout.
//!
//! A set bit marks a personalized parameter (kept and trained locally); a
//! clear bit marks a shared one (sent to the server and averaged).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Builds a mask of length `len` with the given indices set.
    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = Self::zeros(len);
        for i in indices {
            if i >= len {
                return Err(Error::InvalidRange {
                    start: i,
                    end: i + 1,
                    len,
                });
            }
            mask.bits[i] = true;
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.bits[i] = value;
    }

    pub fn as_bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.len() - self.count_ones()
    }

    pub fn count_ones_in(&self, range: Range<usize>) -> usize {
        self.bits[range].iter().filter(|&&b| b).count()
    }

    pub fn ones_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn not(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        check_len("mask or", self.len(), other.len())?;
        Ok(Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Packs bits LSB-first into bytes.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for i in self.ones_indices() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_packed(len: usize, bytes: &[u8]) -> Result<Self> {
        check_len("packed mask bytes", len.div_ceil(8), bytes.len())?;
        let bits = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        // Padding bits past `len` must be clear.
        if !len.is_multiple_of(8) {
            let tail = bytes[len / 8] >> (len % 8);
            if tail != 0 {
                return Err(Error::Blob("nonzero padding bits in mask payload".into()));
            }
        }
        Ok(Self { bits })
    }

    /// Renders as a string of `0`/`1`, index 0 first.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid("mask", alloc::format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    len: usize,
    ones: usize,
    bits: String,
}

impl Serialize for MaskVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        MaskRepr {
            len: self.len(),
            ones: self.count_ones(),
            bits: self.to_bit_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MaskVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MaskRepr::deserialize(deserializer)?;
        let mask = MaskVector::from_bit_string(&repr.bits).map_err(D::Error::custom)?;
        if mask.len() != repr.len || mask.count_ones() != repr.ones {
            return Err(D::Error::custom("mask length or popcount disagrees with bits"));
        }
        Ok(mask)
    }
}
